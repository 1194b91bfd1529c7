"""Computable bounds on the prediction error of a learned DKR.

The one-step error ``e_k = x̂_k − x_k`` of the model in use for batch
``B_τ`` is bounded by ``L_a + L_b + L_c``::

    L_a = ‖C_τA_τ‖·μ_g·μ_x + ‖C_τB_τ‖·μ_u
    L_b = ‖C_τ·(Σ_{i=0}^{s−2} A_τ^i + A_τ^{s−2}·S_τ)‖·L1
    L_c = μ_x + L2

with the accumulation over all earlier batches::

    S_τ = Σ_{j=1}^{β_{τ−1}} A_{τ−1}^j
          + Σ_{l=1}^{τ−1} (Π_{n=τ−1…l} A_n^{β_n}) · Σ_{j=1}^{β_{l−1}} A_{l−1}^j

``μ_x`` and ``μ_u`` are the largest consecutive increments of states and
inputs, ``μ_g`` the sampled Lipschitz estimate of the observable and
``L1``/``L2`` the largest lifted and reconstruction residuals of the batch.
"""

from __future__ import annotations

import dataclasses
import logging
import typing
from collections.abc import Sequence

import numpy as np

from dktv import PreconditionError
from dktv.core import DataBatch, DkrSnapshot, lift, rollout
from dktv.observable import estimate_lipschitz
from dktv.regression import check_rank

log: logging.Logger = logging.getLogger(__name__)

MatrixNorm = typing.Literal["spectral", "frobenius"]


def matrix_norm(M: np.ndarray, norm: MatrixNorm = "spectral") -> float:
    if M.size == 0:
        return 0.0
    if norm == "frobenius":
        return float(np.linalg.norm(M, "fro"))
    return float(np.linalg.norm(M, 2))


@dataclasses.dataclass(frozen=True)
class BatchRecord:
    tau: int
    A: np.ndarray
    C: np.ndarray
    beta: int


class BatchHistory:
    """Per-batch ``(A_τ, C_τ, β_τ)`` in order of ``τ``."""

    records: list[BatchRecord]

    def __init__(self, records: Sequence[BatchRecord] = ()) -> None:
        self.records = []
        for record in records:
            self.add(record)

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[DkrSnapshot]) -> BatchHistory:
        return cls(
            [
                BatchRecord(s.tau, s.matrices.A, s.matrices.C, s.beta)
                for s in snapshots
            ]
        )

    def add(self, record: BatchRecord) -> None:
        if record.tau != len(self.records):
            raise PreconditionError(
                f"expected the record of batch {len(self.records)}, got {record.tau}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, tau: int) -> BatchRecord:
        return self.records[tau]

    def upto(self, tau: int) -> BatchHistory:
        return BatchHistory(self.records[: tau + 1])


@dataclasses.dataclass(frozen=True)
class ErrorBoundReport:
    """Every term of the error bound for one batch, plus the errors it bounds."""

    tau: int
    mu_x: float
    mu_u: float
    mu_g: float
    """Sampled lower estimate of the observable's Lipschitz constant."""

    L1: float
    L2: float
    L_a: float
    L_b: float
    L_c: float
    total_bound: float
    asymptotic_bound: float
    """``L_a + L_c``, the bound once the lifted dynamics are exact."""

    steps: int
    """``s = k − k_τ`` used in the accumulation term ``L_b``."""

    norm: MatrixNorm = "spectral"
    observed_errors: tuple[float, ...] = ()
    observed_indices: tuple[int, ...] = ()
    violated: bool = False
    violation_indices: tuple[int, ...] = ()
    assumption_breaches: tuple[str, ...] = ()
    mu_g_empirical: bool = True

    def to_dict(self) -> dict[str, typing.Any]:
        data = dataclasses.asdict(self)
        for key in (
            "observed_errors",
            "observed_indices",
            "violation_indices",
            "assumption_breaches",
        ):
            data[key] = list(data[key])
        return data

    @property
    def max_observed(self) -> float:
        return max(self.observed_errors, default=0.0)


def empirical_increments(batch: DataBatch) -> tuple[float, float]:
    """``(μ_x, μ_u)``, the largest consecutive state and input increments."""
    states = batch.states
    mu_x = float(np.max(np.linalg.norm(np.diff(states, axis=1), axis=0)))
    if batch.m == 0 or batch.beta < 2:
        return mu_x, 0.0
    mu_u = float(np.max(np.linalg.norm(np.diff(batch.U, axis=1), axis=0)))
    return mu_x, mu_u


def residual_maxima(batch: DataBatch, snapshot: DkrSnapshot) -> tuple[float, float]:
    """``(L1, L2)``: largest lifted transition residual and largest reconstruction residual.

    ``L2`` runs over all ``β+1`` states of the batch.
    """
    if batch.beta == 0:
        raise PreconditionError("residual maxima need a non-empty batch")
    M = snapshot.matrices
    G, G_bar = lift(snapshot.net, batch)
    R1 = G_bar - M.A @ G - M.B @ batch.U
    states = batch.states
    R2 = states - M.C @ snapshot.net.forward_batch(states)
    return (
        float(np.max(np.linalg.norm(R1, axis=0))),
        float(np.max(np.linalg.norm(R2, axis=0))),
    )


def _power_sum(A: np.ndarray, first: int, last: int) -> np.ndarray:
    """``Σ_{i=first}^{last} Aⁱ``, zero for an empty range."""
    total = np.zeros_like(A)
    if last < first:
        return total
    power = np.linalg.matrix_power(A, first)
    for _ in range(first, last + 1):
        total = total + power
        power = power @ A
    return total


def accumulation_matrix(history: BatchHistory, steps: int) -> np.ndarray:
    """The matrix inside ``L_b = ‖C_τ · (…)‖·L1`` for the newest batch of ``history``."""
    if len(history) == 0:
        raise PreconditionError("the error bound needs at least one batch record")
    tau = len(history) - 1
    A_tau = history[tau].A
    if steps < 2:
        return np.zeros_like(A_tau)
    within = _power_sum(A_tau, 0, steps - 2)
    if tau == 0:
        return within
    carried = _power_sum(history[tau - 1].A, 1, history[tau - 1].beta)
    product = np.eye(A_tau.shape[0])
    for l in range(tau - 1, 0, -1):
        product = product @ np.linalg.matrix_power(history[l].A, history[l].beta)
        carried = carried + product @ _power_sum(
            history[l - 1].A, 1, history[l - 1].beta
        )
    return within + np.linalg.matrix_power(A_tau, steps - 2) @ carried


def bound_components(
    history: BatchHistory,
    snapshot: DkrSnapshot,
    mu: tuple[float, float],
    mu_g: float,
    residuals: tuple[float, float],
    steps: typing.Optional[int] = None,
    norm: MatrixNorm = "spectral",
) -> ErrorBoundReport:
    """Assemble ``L_a``, ``L_b``, ``L_c`` and the total bound.

    :param history: Records of batches ``0 … τ``, the last one being the
        batch of ``snapshot``.
    :param mu: ``(μ_x, μ_u)`` from :func:`empirical_increments`.
    :param mu_g: Lipschitz estimate of the observable.
    :param residuals: ``(L1, L2)`` from :func:`residual_maxima`.
    :param steps: ``s = k − k_τ``, defaults to ``β_τ + 1``.
    """
    if len(history) == 0:
        raise PreconditionError("the error bound needs at least one batch record")
    tau = len(history) - 1
    M = snapshot.matrices
    mu_x, mu_u = mu
    L1, L2 = residuals
    s = history[tau].beta + 1 if steps is None else steps

    L_a = (
        matrix_norm(M.C @ M.A, norm) * mu_g * mu_x
        + matrix_norm(M.C @ M.B, norm) * mu_u
    )
    L_b = matrix_norm(M.C @ accumulation_matrix(history, s), norm) * L1
    L_c = mu_x + L2

    breaches = []
    for record in history.records:
        a_norm = matrix_norm(record.A, norm)
        if a_norm >= 1.0:
            breaches.append(f"‖A_{record.tau}‖={a_norm:.4g} ≥ 1")
    return ErrorBoundReport(
        tau=snapshot.tau,
        mu_x=mu_x,
        mu_u=mu_u,
        mu_g=mu_g,
        L1=L1,
        L2=L2,
        L_a=L_a,
        L_b=L_b,
        L_c=L_c,
        total_bound=L_a + L_b + L_c,
        asymptotic_bound=L_a + L_c,
        steps=s,
        norm=norm,
        assumption_breaches=tuple(breaches),
    )


def validate(
    errors: Sequence[float],
    report: ErrorBoundReport,
    indices: typing.Optional[Sequence[int]] = None,
) -> ErrorBoundReport:
    """Attach observed errors to ``report`` and flag those above the total bound.

    :param indices: Global sample index of every error, defaults to the
        position in ``errors``.
    """
    errors = tuple(float(e) for e in errors)
    indices = tuple(range(len(errors))) if indices is None else tuple(indices)
    if len(indices) != len(errors):
        raise PreconditionError("every observed error needs a sample index")
    offending = tuple(k for k, e in zip(indices, errors) if e > report.total_bound)
    if offending:
        log.warning(
            "batch %d: %d errors exceed the bound %.4g (first at k=%d)%s",
            report.tau,
            len(offending),
            report.total_bound,
            offending[0],
            f", assumptions breached: {'; '.join(report.assumption_breaches)}"
            if report.assumption_breaches
            else "",
        )
    return dataclasses.replace(
        report,
        observed_errors=errors,
        observed_indices=indices,
        violated=bool(offending),
        violation_indices=offending,
    )


def one_step_errors(
    snapshot: DkrSnapshot, batch: DataBatch
) -> tuple[np.ndarray, np.ndarray]:
    """One-step prediction errors of ``snapshot`` on every transition of ``batch``.

    :return: Global sample indices ``k`` of the predicted states and ``‖e_k‖``.
    """
    M = snapshot.matrices
    G, _ = lift(snapshot.net, batch)
    predicted = M.C @ (M.A @ G + M.B @ batch.U)
    errors = np.linalg.norm(predicted - batch.X_bar, axis=0)
    indices = batch.k_start + 1 + np.arange(batch.beta)
    return indices, errors


def rollout_errors(
    snapshot: DkrSnapshot, batch: DataBatch
) -> tuple[np.ndarray, np.ndarray]:
    """Errors of a multi-step prediction anchored at the batch's first state."""
    predicted = rollout(snapshot, batch.X[:, 0], batch.U)
    states = batch.states[:, : predicted.states.shape[1]]
    errors = np.linalg.norm(predicted.states - states, axis=0)
    indices = batch.k_start + np.arange(errors.size)
    return indices[1:], errors[1:]


def report_for(
    batch: DataBatch,
    snapshot: DkrSnapshot,
    history: BatchHistory,
    norm: MatrixNorm = "spectral",
    lipschitz_pairs: typing.Optional[int] = None,
    seed: typing.Optional[int] = None,
) -> ErrorBoundReport:
    """Bound report of ``snapshot`` applied to ``batch``, validated against its one-step errors.

    ``batch`` is usually the batch following the one ``snapshot`` was
    trained on, so the report covers the zero-order-held model in use.
    """
    history = history.upto(snapshot.tau)
    mu = empirical_increments(batch)
    residuals = residual_maxima(batch, snapshot)
    states = batch.states
    try:
        mu_g = estimate_lipschitz(
            snapshot.net, states, max_pairs=lipschitz_pairs, seed=seed
        )
    except PreconditionError:
        mu_g = 0.0
    report = bound_components(history, snapshot, mu, mu_g, residuals, norm=norm)
    G, _ = lift(snapshot.net, batch)
    rank = check_rank(G, batch.U)
    if not rank.satisfied:
        report = dataclasses.replace(
            report,
            assumption_breaches=(
                *report.assumption_breaches,
                f"lifted batch {batch.tau} is rank deficient ({rank})",
            ),
        )
    indices, errors = one_step_errors(snapshot, batch)
    return validate(errors.tolist(), report, indices.tolist())
