"""
Deep Koopman learning for time-varying systems.

The package approximates an unknown nonlinear time-varying system by a
sequence of lifted linear models ``{g(·, θ_τ), A_τ, B_τ, C_τ}`` that are
refreshed batch by batch, reports computable prediction error bounds and
controls systems with model predictive control on the lifted model.
"""

from __future__ import annotations

import logging
import typing
from importlib import metadata

try:
    __version__: str = metadata.version("dktv")
except metadata.PackageNotFoundError:  # pragma: no cover - source checkout
    __version__ = "0.0.0"


class DktvError(RuntimeError):
    """Abort a computation.

    Base class of all errors raised by :mod:`dktv`. Raising this exception
    inside an :class:`~dktv.verdict.Experiment` turns the experiment's
    verdict into ``error`` instead of crashing the command line run.
    """


class DimensionError(DktvError, ValueError):
    """An array does not have the dimensions the operation expects."""


class PreconditionError(DktvError, ValueError):
    """The inputs violate a documented precondition (for example ``β < r+m``)."""


class RankDeficiencyError(DktvError):
    """The lifted data matrices are not of full row rank.

    :param message: Human-readable explanation.
    :param report: The :class:`~dktv.regression.RankReport` that failed.
    """

    report: typing.Any

    def __init__(self, message: str, report: typing.Any = None) -> None:
        super().__init__(message)
        self.report = report


class DivergenceError(DktvError):
    """A training loss became non-finite."""


class SingularityError(DktvError):
    """A simulator was evaluated at a singular configuration."""


class SimulationError(DktvError):
    """Numerical integration produced non-finite states."""


class ConfigError(DktvError, ValueError):
    """An experiment configuration failed schema validation."""


class SnapshotError(DktvError):
    """Stored snapshots are missing or unreadable."""


log: logging.Logger = logging.getLogger("dktv")
"""
**dktv** logs through the standard :mod:`logging` module. All sub-modules
log to children of this logger. The command line runtime attaches a handler
to it and sets the level from the number of ``-v`` flags: warnings are always
printed, ``-vv`` adds *info* and ``-vvv`` adds *debug* messages.
"""

from dktv.observable import (  # noqa: E402
    AdamState,
    LayerSpec,
    ObservableNet,
    adam_step,
    estimate_lipschitz,
    loss_gradient,
)
from dktv.regression import (  # noqa: E402
    KoopmanMatrices,
    RankReport,
    RecursiveCache,
    check_rank,
    component_losses,
    fit_batch,
    recursive_update,
)
from dktv.core import (  # noqa: E402
    DataBatch,
    DkrSnapshot,
    OnlineDktv,
    TrainConfig,
    initialize,
    partition_stream,
    predict_one,
    reduced_system,
    rollout,
    step,
)

__all__ = [
    "AdamState",
    "ConfigError",
    "DataBatch",
    "DimensionError",
    "DivergenceError",
    "DkrSnapshot",
    "DktvError",
    "KoopmanMatrices",
    "LayerSpec",
    "ObservableNet",
    "OnlineDktv",
    "PreconditionError",
    "RankDeficiencyError",
    "RankReport",
    "RecursiveCache",
    "SimulationError",
    "SingularityError",
    "SnapshotError",
    "TrainConfig",
    "adam_step",
    "check_rank",
    "component_losses",
    "estimate_lipschitz",
    "fit_batch",
    "initialize",
    "log",
    "loss_gradient",
    "partition_stream",
    "predict_one",
    "recursive_update",
    "reduced_system",
    "rollout",
    "step",
]
