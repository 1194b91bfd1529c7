"""The online learning loop.

A time-ordered stream of states ``x_k`` and inputs ``u_k`` is cut into
batches ``B_τ`` of ``β_τ`` transitions. Batch ``τ`` starts at global
sample index ``k_τ`` and ends at ``k_τ + β_τ``, which is also the first
sample of batch ``τ+1``. The first batch initializes a deep Koopman
representation (DKR), every further batch first refits ``A``, ``B`` and
``C`` recursively and then optimizes ``θ`` on the new data.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing
from collections.abc import Sequence

import numpy as np
import scipy.linalg

from dktv import (
    DimensionError,
    DivergenceError,
    PreconditionError,
    RankDeficiencyError,
)
from dktv.observable import (
    AdamState,
    LossTerms,
    NetSpec,
    ObservableNet,
    adam_step,
    norm_penalty_gradient,
    objective,
)
from dktv.regression import (
    KoopmanMatrices,
    RecursiveCache,
    check_rank,
    fit_batch,
    recursive_update,
)

log: logging.Logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DataBatch:
    """One batch ``B_τ`` of ``β`` transitions ``(x_k, x_{k+1}, u_k)``."""

    tau: int
    k_start: int
    """Global sample index ``k_τ`` of the first column of :attr:`X`."""

    X: np.ndarray
    """``n×β`` states ``x_{k_τ} … x_{k_τ+β−1}``."""

    X_bar: np.ndarray
    """``n×β`` successors ``x_{k_τ+1} … x_{k_τ+β}``."""

    U: np.ndarray
    """``m×β`` inputs, ``0×β`` for autonomous systems."""

    def __post_init__(self) -> None:
        if self.X.ndim != 2 or self.X_bar.shape != self.X.shape:
            raise DimensionError(
                f"X and X_bar must share an n×β shape, got {self.X.shape} and {self.X_bar.shape}"
            )
        if self.U.ndim != 2 or self.U.shape[1] != self.X.shape[1]:
            raise DimensionError(
                f"U must be m×{self.X.shape[1]}, got shape {self.U.shape}"
            )

    @property
    def beta(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def k_end(self) -> int:
        """Global index of the last sample, the first one of the next batch."""
        return self.k_start + self.beta

    @property
    def states(self) -> np.ndarray:
        """All ``β+1`` states of the batch."""
        return np.hstack([self.X, self.X_bar[:, -1:]])

    @classmethod
    def from_arrays(
        cls,
        states: np.ndarray,
        inputs: typing.Optional[np.ndarray] = None,
        tau: int = 0,
        k_start: int = 0,
    ) -> DataBatch:
        """Batch from ``β+1`` consecutive states and at least ``β`` inputs."""
        states = np.asarray(states, dtype=float)
        beta = states.shape[1] - 1
        U = (
            np.zeros((0, beta))
            if inputs is None
            else np.asarray(inputs, dtype=float)[:, :beta]
        )
        return cls(tau, k_start, states[:, :-1], states[:, 1:], U)


class EpochRecord(typing.NamedTuple):
    """Loss at the start of one training epoch."""

    epoch: int
    total: float
    L1: float
    L2: float
    penalty: float


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    """Adam steps on ``θ`` per batch. ``0`` turns :func:`step` into a pure refit."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    w: float = 0.5
    """Weight of the lifted residual against the reconstruction residual."""

    lambda_A: float = 0.0
    """Weight of the penalty ``max(0, ‖A‖_F − 1)²``, ``0`` switches it off."""

    seed: int = 0
    relift_history: bool = False
    """Re-lift all previously absorbed batches with the new ``θ`` on every step."""

    pretrain_epochs: int = 0
    """Adam steps on the first batch during :func:`initialize`."""

    tolerance: float = 1e-12
    """Training on a batch stops once the loss drops below ``tolerance·max(1, mean x²)``."""

    def __post_init__(self) -> None:
        if not 0.0 <= self.w <= 1.0:
            raise PreconditionError(f"loss weight w must lie in [0, 1], got {self.w}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise PreconditionError("epoch counts must not be negative")
        if self.lambda_A < 0.0:
            raise PreconditionError("lambda_A must not be negative")
        if self.tolerance < 0.0:
            raise PreconditionError("tolerance must not be negative")


@dataclasses.dataclass(frozen=True)
class DkrSnapshot:
    """A deep Koopman representation ``{g(·, θ_τ), A_τ, B_τ, C_τ}`` after batch ``τ``."""

    net: ObservableNet
    matrices: KoopmanMatrices
    tau: int
    k_start: int = 0
    beta: int = 0
    train_stats: tuple[EpochRecord, ...] = ()
    diverged: bool = False
    """Training on this batch produced a non-finite loss and ``θ`` was rolled back."""

    def __post_init__(self) -> None:
        if self.net.output_dim != self.matrices.r:
            raise DimensionError(
                f"network output dimension {self.net.output_dim} does not match "
                f"r={self.matrices.r}"
            )

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    @property
    def n(self) -> int:
        return self.matrices.n

    @property
    def m(self) -> int:
        return self.matrices.m

    @property
    def r(self) -> int:
        return self.matrices.r

    @property
    def final_loss(self) -> float:
        return self.train_stats[-1].total if self.train_stats else math.nan


def _schedule(beta_schedule: typing.Union[int, Sequence[int]], tau: int) -> int:
    if isinstance(beta_schedule, int):
        return beta_schedule
    if len(beta_schedule) == 0:
        raise PreconditionError("the β schedule is empty")
    return beta_schedule[min(tau, len(beta_schedule) - 1)]


def partition_stream(
    states: np.ndarray,
    inputs: typing.Optional[np.ndarray] = None,
    beta_schedule: typing.Union[int, Sequence[int]] = 10,
) -> list[DataBatch]:
    """Cut a sampled trajectory into overlapping batches.

    Batch ``τ`` holds the samples ``k_τ … k_τ+β_τ``, consecutive batches
    share exactly one sample. A trailing partial batch is withheld.

    :param states: ``n×N`` states in time order.
    :param inputs: ``m×N`` (or ``m×(N−1)``) inputs, :obj:`None` when ``m = 0``.
    :param beta_schedule: A constant ``β`` or the list ``β_0, β_1, …`` whose
        last entry repeats.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2:
        raise DimensionError(f"states must be n×N, got shape {states.shape}")
    N = states.shape[1]
    if inputs is None:
        inputs = np.zeros((0, N))
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] < N - 1:
        raise DimensionError(f"inputs must be m×{N} or m×{N - 1}, got {inputs.shape}")
    batches = []
    k = 0
    tau = 0
    while True:
        beta = _schedule(beta_schedule, tau)
        if beta < 1:
            raise PreconditionError(f"batch sizes must be positive, got β={beta}")
        if k + beta > N - 1:
            break
        batches.append(
            DataBatch(
                tau=tau,
                k_start=k,
                X=states[:, k : k + beta].copy(),
                X_bar=states[:, k + 1 : k + beta + 1].copy(),
                U=inputs[:, k : k + beta].copy(),
            )
        )
        k += beta
        tau += 1
    return batches


def batch_index(k: int, beta0: int, beta: int) -> int:
    """Label ``τ = ⌈(k − β₀)/β⌉`` of the batch whose model predicts sample ``k``."""
    return max(0, math.ceil((k - beta0) / beta))


def lift(net: ObservableNet, batch: DataBatch) -> tuple[np.ndarray, np.ndarray]:
    """``(G, Ḡ)`` of a batch under ``net`` in one forward pass."""
    lifted = net.forward_batch(np.hstack([batch.X, batch.X_bar]))
    return lifted[:, : batch.beta], lifted[:, batch.beta :]


def _relifted_cache(
    net: ObservableNet, batches: Sequence[DataBatch], n: int, m: int
) -> RecursiveCache:
    cache = RecursiveCache.empty(n, net.output_dim, m)
    for batch in batches:
        G, G_bar = lift(net, batch)
        cache = cache.absorb(G, G_bar, batch.U, batch.X)
    return cache


class _Refit:
    """Refit of the matrices for a changing ``θ`` against fixed earlier data."""

    def __init__(
        self,
        batch: DataBatch,
        base_cache: typing.Optional[RecursiveCache],
        base_matrices: typing.Optional[KoopmanMatrices],
    ) -> None:
        self.batch = batch
        self.base_cache = base_cache
        self.base_matrices = base_matrices

    def __call__(self, net: ObservableNet) -> tuple[KoopmanMatrices, RecursiveCache]:
        G, G_bar = lift(net, self.batch)
        if self.base_cache is None or self.base_matrices is None:
            cache = RecursiveCache.empty(self.batch.n, net.output_dim, self.batch.m)
            cache = cache.absorb(G, G_bar, self.batch.U, self.batch.X)
            return cache.matrices(), cache
        return recursive_update(
            self.base_cache, self.base_matrices, G, G_bar, self.batch.U, self.batch.X
        )


class _Trained(typing.NamedTuple):
    net: ObservableNet
    matrices: KoopmanMatrices
    cache: RecursiveCache
    trace: tuple[EpochRecord, ...]
    diverged: bool


def _train(
    net: ObservableNet,
    batch: DataBatch,
    refit: _Refit,
    matrices: KoopmanMatrices,
    cache: RecursiveCache,
    epochs: int,
    config: TrainConfig,
) -> _Trained:
    adam = AdamState.zeros(
        net.n_params,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    scale = float(np.mean(batch.X * batch.X)) if batch.beta else 0.0
    tolerance = config.tolerance * max(1.0, scale)
    trace: list[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        terms: LossTerms
        try:
            terms, grad = objective(
                net, batch, matrices, w=config.w, lambda_A=config.lambda_A
            )
            if config.lambda_A > 0.0:
                grad = grad + norm_penalty_gradient(
                    net, batch, cache, matrices, config.lambda_A
                )
                if not np.all(np.isfinite(grad)):
                    raise DivergenceError("non-finite norm penalty gradient")
        except DivergenceError as e:
            log.warning(
                "training on batch %d diverged in epoch %d (%s), rolling back θ",
                batch.tau,
                epoch,
                e,
            )
            return _Trained(net, matrices, cache, tuple(trace), True)
        trace.append(EpochRecord(epoch, *terms))
        log.debug(
            "batch %d epoch %d: L=%.6g L1=%.6g L2=%.6g penalty=%.3g",
            batch.tau,
            epoch,
            *terms,
        )
        if terms.total <= tolerance:
            # round-off gradients would be scaled up to full Adam steps
            log.debug("batch %d converged in epoch %d", batch.tau, epoch)
            break
        theta, adam = adam_step(adam, net.theta, grad)
        candidate = net.with_theta(theta)
        try:
            candidate_matrices, candidate_cache = refit(candidate)
        except RankDeficiencyError as e:
            log.warning(
                "stopping training on batch %d after epoch %d: %s", batch.tau, epoch, e
            )
            break
        if not candidate_matrices.is_finite():
            log.warning(
                "refit on batch %d became non-finite in epoch %d, rolling back θ",
                batch.tau,
                epoch,
            )
            return _Trained(net, matrices, cache, tuple(trace), True)
        net, matrices, cache = candidate, candidate_matrices, candidate_cache
    return _Trained(net, matrices, cache, tuple(trace), False)


def _build_net(
    net: typing.Union[ObservableNet, NetSpec], n: int, seed: int
) -> ObservableNet:
    if isinstance(net, NetSpec):
        net = net.build(n, seed=seed)
    if net.input_dim != n:
        raise DimensionError(
            f"the observable expects {net.input_dim} states, the data has {n}"
        )
    return net


def initialize(
    batch0: DataBatch,
    net: typing.Union[ObservableNet, NetSpec],
    config: TrainConfig = TrainConfig(),
) -> tuple[DkrSnapshot, RecursiveCache]:
    """DKR and seeded cache from the first batch.

    :param net: A ready network or the architecture of a randomly
        initialized one (seeded with ``config.seed``).

    :raises RankDeficiencyError: If the lifted first batch is not of full
        row rank.
    """
    net = _build_net(net, batch0.n, config.seed)
    G, G_bar = lift(net, batch0)
    report = check_rank(G, batch0.U)
    if batch0.beta < net.output_dim + batch0.m or not report.satisfied:
        raise RankDeficiencyError(
            f"the first batch does not lift to full row rank ({report}); "
            "use a larger β or a smaller lifted dimension r",
            report,
        )
    matrices = fit_batch(G, G_bar, batch0.U, batch0.X)
    cache = RecursiveCache.seed(G, G_bar, batch0.U, batch0.X)
    trace: tuple[EpochRecord, ...] = ()
    diverged = False
    if config.pretrain_epochs > 0:
        trained = _train(
            net,
            batch0,
            _Refit(batch0, None, None),
            matrices,
            cache,
            config.pretrain_epochs,
            config,
        )
        net, matrices, cache = trained.net, trained.matrices, trained.cache
        trace, diverged = trained.trace, trained.diverged
    log.info(
        "initialized DKR on %d transitions: n=%d r=%d m=%d",
        batch0.beta,
        batch0.n,
        net.output_dim,
        batch0.m,
    )
    snapshot = DkrSnapshot(
        net=net,
        matrices=matrices,
        tau=batch0.tau,
        k_start=batch0.k_start,
        beta=batch0.beta,
        train_stats=trace,
        diverged=diverged,
    )
    return snapshot, cache


def step(
    snapshot: DkrSnapshot,
    cache: RecursiveCache,
    new_batch: DataBatch,
    config: TrainConfig = TrainConfig(),
    history: Sequence[DataBatch] = (),
) -> tuple[DkrSnapshot, RecursiveCache]:
    """Absorb ``new_batch``: recursive refit, then ``config.epochs`` Adam steps on ``θ``.

    After every Adam step the matrices are refit from the cache of the
    earlier batches plus the new batch lifted with the updated ``θ``.
    Training stops early once the loss falls below ``config.tolerance``.
    When the loss becomes non-finite ``θ`` is rolled back to the
    snapshot's, the matrices are those of the refit with that ``θ`` and
    the returned snapshot carries ``diverged=True``.

    :param history: All earlier batches, only used with
        ``config.relift_history``.
    """
    if new_batch.tau != snapshot.tau + 1:
        raise PreconditionError(
            f"expected batch {snapshot.tau + 1}, got batch {new_batch.tau}"
        )
    net = snapshot.net
    if config.relift_history and history:
        base_cache = _relifted_cache(net, history, new_batch.n, new_batch.m)
        base_matrices = base_cache.matrices()
    else:
        base_cache, base_matrices = cache, snapshot.matrices
    refit = _Refit(new_batch, base_cache, base_matrices)
    matrices, updated = refit(net)

    trained = _train(net, new_batch, refit, matrices, updated, config.epochs, config)
    if trained.diverged:
        net_out, matrices_out, cache_out = net, matrices, updated
    else:
        net_out, matrices_out, cache_out = trained.net, trained.matrices, trained.cache
    if config.relift_history and history:
        cache_out = _relifted_cache(
            net_out, [*history, new_batch], new_batch.n, new_batch.m
        )
        matrices_out = cache_out.matrices()
    if trained.trace:
        log.info(
            "batch %d: %d epochs, loss %.6g → %.6g",
            new_batch.tau,
            len(trained.trace),
            trained.trace[0].total,
            trained.trace[-1].total,
        )
    return (
        DkrSnapshot(
            net=net_out,
            matrices=matrices_out,
            tau=new_batch.tau,
            k_start=new_batch.k_start,
            beta=new_batch.beta,
            train_stats=trained.trace,
            diverged=trained.diverged,
        ),
        cache_out,
    )


def _input_vector(snapshot: DkrSnapshot, u: typing.Optional[np.ndarray]) -> np.ndarray:
    if u is None:
        u = np.zeros(0)
    u = np.asarray(u, dtype=float).ravel()
    if u.shape != (snapshot.m,):
        raise DimensionError(f"expected an input of length {snapshot.m}, got {u.shape}")
    return u


def predict_one(
    snapshot: DkrSnapshot, x_prev: np.ndarray, u_prev: typing.Optional[np.ndarray] = None
) -> np.ndarray:
    """One-step prediction ``x̂ = C(A·g(x_prev) + B·u_prev)``."""
    u = _input_vector(snapshot, u_prev)
    M = snapshot.matrices
    return M.C @ (M.A @ snapshot.net.forward(x_prev) + M.B @ u)


class Rollout(typing.NamedTuple):
    states: np.ndarray
    """``n×(L+1)`` predicted states starting with ``x_init``."""

    truncated: bool
    """The prediction became non-finite and was cut at the last finite state."""


def rollout(
    snapshot: DkrSnapshot,
    x_init: np.ndarray,
    U_seq: typing.Optional[np.ndarray] = None,
    steps: typing.Optional[int] = None,
) -> Rollout:
    """Iterate :func:`predict_one` from ``x_init``, re-lifting every prediction.

    :param U_seq: ``m×L`` inputs. Autonomous models take ``steps`` instead.
    """
    if U_seq is None:
        U_seq = np.zeros((snapshot.m, steps or 0))
    U_seq = np.asarray(U_seq, dtype=float)
    if U_seq.ndim != 2 or U_seq.shape[0] != snapshot.m:
        raise DimensionError(f"U_seq must be {snapshot.m}×L, got shape {U_seq.shape}")
    x = np.asarray(x_init, dtype=float)
    states = [x]
    for i in range(U_seq.shape[1]):
        x = predict_one(snapshot, x, U_seq[:, i])
        if not np.all(np.isfinite(x)):
            log.warning("rollout became non-finite after %d steps", i)
            return Rollout(np.column_stack(states), True)
        states.append(x)
    return Rollout(np.column_stack(states), False)


def reduced_system(snapshot: DkrSnapshot) -> tuple[np.ndarray, np.ndarray]:
    """State-space matrices ``Â = C·A·C†`` and ``B̂ = C·B``.

    An alternative predictor ``x̂⁺ = Âx̂ + B̂u`` that never re-lifts.

    :raises RankDeficiencyError: If ``C`` is not of full row rank ``n``.
    """
    M = snapshot.matrices
    report = check_rank(M.C.T)
    if report.rank_G < M.n:
        raise RankDeficiencyError(
            f"C has rank {report.rank_G} < n={M.n}, the reduced system is undefined",
            report,
        )
    A_hat = M.C @ M.A @ scipy.linalg.pinv(M.C)
    return A_hat, M.C @ M.B


class OnlineDktv:
    """Streaming learner feeding one sample at a time into the batch loop.

    Every ``β_τ`` samples after the first batch completes the learner runs
    :func:`step`. All snapshots are kept, so predictions can use the model
    that was current at any sample index.

    :param net: Observable network or architecture.
    :param beta_schedule: Constant ``β`` or the schedule ``β_0, β_1, …``.
    :param config: Training settings.
    """

    snapshots: list[DkrSnapshot]

    batches: list[DataBatch]

    cache: typing.Optional[RecursiveCache]

    def __init__(
        self,
        net: typing.Union[ObservableNet, NetSpec],
        beta_schedule: typing.Union[int, Sequence[int]] = 10,
        config: TrainConfig = TrainConfig(),
    ) -> None:
        self._net = net
        self.beta_schedule = beta_schedule
        self.config = config
        self.snapshots = []
        self.batches = []
        self.cache = None
        self._states: list[np.ndarray] = []
        self._inputs: list[np.ndarray] = []
        self._k = 0

    @property
    def current(self) -> typing.Optional[DkrSnapshot]:
        return self.snapshots[-1] if self.snapshots else None

    @property
    def samples_seen(self) -> int:
        return self._k

    def observe(
        self, x: np.ndarray, u: typing.Optional[np.ndarray] = None
    ) -> typing.Optional[DkrSnapshot]:
        """Append sample ``(x_k, u_k)``; returns the new snapshot when a batch completes."""
        self._states.append(np.asarray(x, dtype=float).ravel())
        self._inputs.append(
            np.zeros(0) if u is None else np.asarray(u, dtype=float).ravel()
        )
        self._k += 1
        beta = _schedule(self.beta_schedule, len(self.batches))
        if len(self._states) < beta + 1:
            return None
        k_start = self._k - len(self._states)
        batch = DataBatch.from_arrays(
            np.column_stack(self._states),
            np.column_stack(self._inputs),
            tau=len(self.batches),
            k_start=k_start,
        )
        self._states = self._states[-1:]
        self._inputs = self._inputs[-1:]
        return self.absorb(batch)

    def absorb(self, batch: DataBatch) -> DkrSnapshot:
        """Run :func:`initialize` or :func:`step` on a complete batch."""
        if self.cache is None or not self.snapshots:
            snapshot, self.cache = initialize(batch, self._net, self.config)
        else:
            snapshot, self.cache = step(
                self.snapshots[-1],
                self.cache,
                batch,
                self.config,
                history=self.batches,
            )
        self.batches.append(batch)
        self.snapshots.append(snapshot)
        return snapshot

    def fit_stream(
        self, states: np.ndarray, inputs: typing.Optional[np.ndarray] = None
    ) -> list[DkrSnapshot]:
        """Process a complete recorded trajectory batch by batch.

        Samples after the last complete batch stay buffered, so that
        :meth:`observe` continues the stream at sample ``N``. With only
        ``N−1`` inputs the last one is held for the final sample.
        """
        if self._k:
            raise PreconditionError("fit_stream needs a learner that has not seen samples")
        states = np.asarray(states, dtype=float)
        batches = partition_stream(states, inputs, self.beta_schedule)
        for batch in batches:
            self.absorb(batch)
        N = states.shape[1]
        m = batches[0].m if batches else (0 if inputs is None else np.shape(inputs)[0])
        held = np.zeros((m, N)) if inputs is None else np.asarray(inputs, dtype=float)[:, :N]
        if held.shape[1] < N:
            held = np.hstack([held, held[:, -1:]])
        start = batches[-1].k_end if batches else 0
        self._states = [states[:, k].copy() for k in range(start, N)]
        self._inputs = [held[:, k].copy() for k in range(start, N)]
        self._k = N
        return self.snapshots

    def snapshot_for(self, k: int) -> DkrSnapshot:
        """Zero-order hold of the model: the newest snapshot learned from samples before ``k``."""
        if not self.snapshots:
            raise PreconditionError("no batch has been absorbed yet")
        usable = [s for s in self.snapshots if s.k_start + s.beta < k]
        return usable[-1] if usable else self.snapshots[0]
