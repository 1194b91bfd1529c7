"""Comparison methods: time-varying DMD and a single one-step network."""

from __future__ import annotations

import dataclasses
import logging
import math
import typing

import numpy as np

from dktv.core import DataBatch, TrainConfig
from dktv.observable import (
    Activation,
    AdamState,
    LayerSpec,
    ObservableNet,
    adam_step,
    init_params,
)
from dktv.regression import KoopmanMatrices, RecursiveCache, fit_batch, recursive_update

log: logging.Logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TvdmdModel:
    """Linear model ``x⁺ = A_lin·x + B_lin·u`` fit on raw states."""

    A_lin: np.ndarray
    B_lin: np.ndarray
    window: int
    """Number of transitions the model was fit on."""


def tvdmd_fit(batch: DataBatch) -> TvdmdModel:
    """``[A_lin, B_lin] = X̄·[X; U]†`` on one batch.

    :raises RankDeficiencyError: If ``[X; U]`` is not of full row rank.
    """
    matrices = fit_batch(batch.X, batch.X_bar, batch.U, batch.X)
    return TvdmdModel(matrices.A, matrices.B, batch.beta)


def tvdmd_predict(
    model: TvdmdModel, x: np.ndarray, u: typing.Optional[np.ndarray] = None
) -> np.ndarray:
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).ravel()
    return model.A_lin @ np.asarray(x, dtype=float) + model.B_lin @ u


class TvdmdTracker:
    """Refits TVDMD batch by batch.

    :param accumulate: Fit on all batches seen so far through the recursive
        cache instead of on the newest batch only.
    """

    models: list[TvdmdModel]

    def __init__(self, accumulate: bool = False) -> None:
        self.accumulate = accumulate
        self.models = []
        self._cache: typing.Optional[RecursiveCache] = None
        self._matrices: typing.Optional[KoopmanMatrices] = None
        self._seen = 0

    def update(self, batch: DataBatch) -> TvdmdModel:
        self._seen += batch.beta
        if not self.accumulate:
            model = tvdmd_fit(batch)
        elif self._cache is None or self._matrices is None:
            model = tvdmd_fit(batch)
            self._cache = RecursiveCache.seed(batch.X, batch.X_bar, batch.U, batch.X)
            self._matrices = KoopmanMatrices(
                model.A_lin, model.B_lin, np.eye(batch.n)
            )
        else:
            self._matrices, self._cache = recursive_update(
                self._cache, self._matrices, batch.X, batch.X_bar, batch.U, batch.X
            )
            model = TvdmdModel(self._matrices.A, self._matrices.B, self._seen)
        self.models.append(model)
        return model

    @property
    def current(self) -> typing.Optional[TvdmdModel]:
        return self.models[-1] if self.models else None


@dataclasses.dataclass(frozen=True)
class SingleDnnModel:
    """One-step predictor ``x⁺ = N(x, u, ν)``."""

    net: ObservableNet
    n: int
    m: int

    @classmethod
    def build(
        cls,
        n: int,
        m: int,
        hidden: typing.Sequence[int] = (64,),
        hidden_activation: Activation = "gaussian",
        seed: typing.Optional[int] = None,
    ) -> SingleDnnModel:
        """Network ``ℝ^{n+m} → hidden… → ℝⁿ`` with a linear output layer."""
        widths = [n + m, *hidden, n]
        layers = [
            LayerSpec(
                widths[i],
                widths[i + 1],
                hidden_activation if i < len(widths) - 2 else "identity",
            )
            for i in range(len(widths) - 1)
        ]
        return cls(ObservableNet(layers, init_params(layers, np.random.default_rng(seed))), n, m)

    @property
    def nu(self) -> np.ndarray:
        return self.net.theta


def single_dnn_predict(
    model: SingleDnnModel, x: np.ndarray, u: typing.Optional[np.ndarray] = None
) -> np.ndarray:
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).ravel()
    return model.net.forward(np.concatenate([np.asarray(x, dtype=float), u]))


class DnnTraining(typing.NamedTuple):
    model: SingleDnnModel
    losses: tuple[float, ...]
    """Mean squared one-step error at the start of every epoch."""

    diverged: bool


def single_dnn_train(
    model: SingleDnnModel, batch: DataBatch, config: TrainConfig = TrainConfig()
) -> DnnTraining:
    """Adam on the batch mean of ``‖N(x_k, u_k) − x_{k+1}‖²``.

    Uses the same learning rate, weight decay and epoch budget as the DKR
    training so that both methods see identical optimizer settings.
    """
    inputs = np.vstack([batch.X, batch.U])
    beta = batch.beta
    adam = AdamState.zeros(
        model.net.n_params,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    net = model.net
    losses: list[float] = []
    for _ in range(config.epochs):
        residual = net.forward_batch(inputs) - batch.X_bar
        loss = float(np.sum(residual * residual)) / beta
        if not math.isfinite(loss):
            log.warning("single-DNN training on batch %d diverged", batch.tau)
            return DnnTraining(dataclasses.replace(model, net=net), tuple(losses), True)
        losses.append(loss)
        grad = net.vjp(inputs, 2.0 * residual / beta)
        theta, adam = adam_step(adam, net.theta, grad)
        net = net.with_theta(theta)
    return DnnTraining(dataclasses.replace(model, net=net), tuple(losses), False)
