"""Static SVG line plots of experiment results.

Needs the ``plots`` extra (:mod:`matplotlib`). Figures are built through
the object-oriented API on the Agg canvas, so worker threads can render
concurrently without touching :mod:`matplotlib.pyplot` state.
"""

from __future__ import annotations

import importlib
import logging
import typing
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from dktv import ConfigError

if typing.TYPE_CHECKING:
    from matplotlib.axes import Axes
    from matplotlib.figure import Figure

    from dktv.mpc import ClosedLoopResult

log: logging.Logger = logging.getLogger(__name__)


def _figure(rows: int = 1, height: float = 3.0) -> tuple[Figure, list[Axes]]:
    try:
        figure_module = importlib.import_module("matplotlib.figure")
        agg = importlib.import_module("matplotlib.backends.backend_agg")
    except ImportError as e:
        raise ConfigError(
            "plotting needs matplotlib, install the 'plots' extra: pip install 'dktv[plots]'"
        ) from e
    fig = figure_module.Figure(figsize=(7.0, height * rows))
    agg.FigureCanvasAgg(fig)
    axes = [fig.add_subplot(rows, 1, i + 1) for i in range(rows)]
    return fig, axes


def _save(fig: Figure, path: typing.Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    matplotlib = importlib.import_module("matplotlib")
    # no date and a fixed hash salt keep reruns byte-identical
    with matplotlib.rc_context({"svg.hashsalt": "dktv"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    log.debug("wrote %s", path)
    return path


def plot_series(
    path: typing.Union[str, Path],
    x: np.ndarray,
    series: Mapping[str, np.ndarray],
    xlabel: str,
    ylabel: str,
    title: str = "",
    logy: bool = False,
) -> Path:
    fig, (ax,) = _figure()
    for label, y in series.items():
        ax.plot(x[: len(y)], y, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    return _save(fig, path)


def plot_trajectories(
    path: typing.Union[str, Path],
    times: np.ndarray,
    truth: np.ndarray,
    predictions: Mapping[str, np.ndarray],
    state_names: Sequence[str],
) -> Path:
    """One panel per state: the true trajectory and every prediction."""
    n = truth.shape[0]
    fig, axes = _figure(rows=n, height=2.2)
    for i, ax in enumerate(axes):
        ax.plot(times, truth[i], color="black", linewidth=1.5, label="true")
        for label, predicted in predictions.items():
            ax.plot(times[: predicted.shape[1]], predicted[i], "--", linewidth=1.0, label=label)
        ax.set_ylabel(state_names[i])
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc="upper right")
    axes[-1].set_xlabel("t [s]")
    return _save(fig, path)


def plot_width_table(
    path: typing.Union[str, Path], widths: Sequence[int], errors: Sequence[float]
) -> Path:
    fig, (ax,) = _figure()
    ax.plot(widths, errors, "o-")
    ax.set_xscale("log", base=2)
    ax.set_xticks(list(widths), [str(w) for w in widths])
    ax.set_xlabel("hidden nodes n_h")
    ax.set_ylabel("mean prediction error")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_closed_loop(path: typing.Union[str, Path], result: ClosedLoopResult) -> Path:
    """Pole angle, cart position, force and cart friction over time."""
    fig, axes = _figure(rows=4, height=1.8)
    t = result.times
    panels = (
        (result.states[2], "θ̄ [rad]"),
        (result.states[0], "x [m]"),
        (result.inputs[0], "F [N]"),
        (result.mu_c, "μ_c"),
    )
    for ax, (values, label) in zip(axes, panels):
        ax.plot(t, values, linewidth=1.0)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel("t [s]")
    return _save(fig, path)
