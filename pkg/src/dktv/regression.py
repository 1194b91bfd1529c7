"""Least-squares fits of the lifted linear model and their recursive update.

Given lifted snapshots ``G = g(X)``, ``Ḡ = g(X̄)`` and inputs ``U`` the
matrices of a deep Koopman representation solve two linear least-squares
problems::

    [A, B] = Ḡ · [G; U]†        C = X · G†

:func:`fit_batch` solves them directly. :class:`RecursiveCache` keeps the
accumulated cross moments and Gram matrices of everything absorbed so far,
so that :func:`recursive_update` can fold in a new batch with a single
``β×β`` inversion instead of refitting from all data.
"""

from __future__ import annotations

import dataclasses
import logging
import typing

import numpy as np
import scipy.linalg

from dktv import DimensionError, PreconditionError, RankDeficiencyError

log: logging.Logger = logging.getLogger(__name__)

PINV_RTOL: float = 1e-12
"""Relative singular value cutoff of the pseudoinverses."""

RANK_RTOL: float = 1e-12
"""Relative factor of the numerical rank tolerance ``max_dim · σ_max · RANK_RTOL``."""

INVERSE_TOLERANCE: float = 1e-8
"""Maximum ``‖Γ·Γ⁻¹ − I‖_F`` before a cached inverse is rebuilt."""


@dataclasses.dataclass(frozen=True)
class KoopmanMatrices:
    """The linear part ``{A, B, C}`` of a deep Koopman representation."""

    A: np.ndarray
    """``r×r`` lifted state transition."""

    B: np.ndarray
    """``r×m`` lifted input matrix, ``r×0`` for autonomous systems."""

    C: np.ndarray
    """``n×r`` projection back to the original state space."""

    def __post_init__(self) -> None:
        r = self.A.shape[0]
        if self.A.ndim != 2 or self.A.shape != (r, r):
            raise DimensionError(f"A must be square, got shape {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape[0] != r:
            raise DimensionError(
                f"B must have {r} rows to match A, got shape {self.B.shape}"
            )
        if self.C.ndim != 2 or self.C.shape[1] != r:
            raise DimensionError(
                f"C must have {r} columns to match A, got shape {self.C.shape}"
            )

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def AB(self) -> np.ndarray:
        """``[A, B]`` as one ``r×(r+m)`` block."""
        return np.hstack([self.A, self.B])

    @classmethod
    def from_blocks(cls, AB: np.ndarray, C: np.ndarray) -> KoopmanMatrices:
        r = C.shape[1]
        return cls(A=AB[:, :r].copy(), B=AB[:, r:].copy(), C=C)

    @classmethod
    def zeros(cls, n: int, r: int, m: int) -> KoopmanMatrices:
        return cls(A=np.zeros((r, r)), B=np.zeros((r, m)), C=np.zeros((n, r)))

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.A))
            and np.all(np.isfinite(self.B))
            and np.all(np.isfinite(self.C))
        )


@dataclasses.dataclass(frozen=True)
class RankReport:
    """Outcome of the full-row-rank check on ``G`` and ``χ = [G; U]``."""

    rank_G: int
    rank_chi: int
    required_G: int
    """``r``, the number of rows of ``G``."""

    required_chi: int
    """``r+m``, the number of rows of ``χ``."""

    beta: int
    """Number of columns (transitions) that were checked."""

    @property
    def satisfied(self) -> bool:
        return self.rank_G >= self.required_G and self.rank_chi >= self.required_chi

    def __str__(self) -> str:
        return (
            f"rank(G)={self.rank_G}/{self.required_G}, "
            f"rank([G;U])={self.rank_chi}/{self.required_chi}, β={self.beta}"
        )


def _as_inputs(U: typing.Optional[np.ndarray], beta: int) -> np.ndarray:
    if U is None:
        return np.zeros((0, beta))
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[1] != beta:
        raise DimensionError(f"U must be m×{beta}, got shape {U.shape}")
    return U


def _numerical_rank(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    s = scipy.linalg.svdvals(M)
    if s[0] == 0.0:
        return 0
    tol = max(M.shape) * s[0] * RANK_RTOL
    return int(np.count_nonzero(s > tol))


def check_rank(G: np.ndarray, U: typing.Optional[np.ndarray] = None) -> RankReport:
    """Numerical rank of ``G`` and ``[G; U]`` against the full-row-rank requirement.

    :param G: ``r×β`` lifted states.
    :param U: ``m×β`` inputs or :obj:`None` for ``m = 0``.
    """
    G = np.asarray(G, dtype=float)
    U = _as_inputs(U, G.shape[1])
    chi = np.vstack([G, U])
    return RankReport(
        rank_G=_numerical_rank(G),
        rank_chi=_numerical_rank(chi),
        required_G=G.shape[0],
        required_chi=chi.shape[0],
        beta=G.shape[1],
    )


def _check_batch_dims(
    G: np.ndarray, G_bar: np.ndarray, U: np.ndarray, X: np.ndarray
) -> None:
    if G.ndim != 2 or G_bar.shape != G.shape:
        raise DimensionError(
            f"G and G_bar must have the same r×β shape, got {G.shape} and {G_bar.shape}"
        )
    if X.ndim != 2 or X.shape[1] != G.shape[1]:
        raise DimensionError(f"X must be n×{G.shape[1]}, got shape {X.shape}")
    if U.shape[1] != G.shape[1]:
        raise DimensionError(f"U must be m×{G.shape[1]}, got shape {U.shape}")


def fit_batch(
    G: np.ndarray,
    G_bar: np.ndarray,
    U: typing.Optional[np.ndarray],
    X: np.ndarray,
    require_rank: bool = True,
) -> KoopmanMatrices:
    """Minimum-norm least-squares fit of ``A``, ``B`` and ``C`` on one batch.

    :param G: ``r×β`` lifted states ``g(x_k)``.
    :param G_bar: ``r×β`` lifted successors ``g(x_{k+1})``.
    :param U: ``m×β`` inputs or :obj:`None` for autonomous systems.
    :param X: ``n×β`` states.
    :param require_rank: Reject short or rank-deficient batches. When
        :obj:`False` the pseudoinverse solution is returned anyway, which is
        the minimum Frobenius norm solution of the normal equations.

    :raises PreconditionError: If ``β < r+m``.
    :raises RankDeficiencyError: If ``G`` or ``[G; U]`` lose row rank.
    """
    G = np.asarray(G, dtype=float)
    G_bar = np.asarray(G_bar, dtype=float)
    X = np.asarray(X, dtype=float)
    U = _as_inputs(U, G.shape[1])
    _check_batch_dims(G, G_bar, U, X)
    r, beta = G.shape
    m = U.shape[0]
    if require_rank:
        if beta < r + m:
            raise PreconditionError(
                f"batch size β={beta} is smaller than r+m={r + m}; "
                "full row rank of the lifted data needs β ≥ r+m"
            )
        report = check_rank(G, U)
        if not report.satisfied:
            raise RankDeficiencyError(
                f"lifted data is not of full row rank ({report})", report
            )
    chi = np.vstack([G, U])
    AB = G_bar @ scipy.linalg.pinv(chi, rtol=PINV_RTOL)
    C = X @ scipy.linalg.pinv(G, rtol=PINV_RTOL)
    return KoopmanMatrices.from_blocks(AB, C)


def component_losses(
    G: np.ndarray,
    G_bar: np.ndarray,
    U: typing.Optional[np.ndarray],
    X: np.ndarray,
    matrices: KoopmanMatrices,
) -> tuple[float, float]:
    """Mean squared lifted residual ``L1`` and reconstruction residual ``L2``.

    ``L1 = ‖Ḡ − AG − BU‖²_F / β`` and ``L2 = ‖X − CG‖²_F / β``.
    """
    G = np.asarray(G, dtype=float)
    beta = G.shape[1]
    U = _as_inputs(U, beta)
    if beta == 0:
        return 0.0, 0.0
    R1 = G_bar - matrices.A @ G - matrices.B @ U
    R2 = X - matrices.C @ G
    return float(np.sum(R1 * R1) / beta), float(np.sum(R2 * R2) / beta)


def _spd_inverse(gram: np.ndarray) -> np.ndarray:
    factor = scipy.linalg.cho_factor(gram, lower=True)
    return scipy.linalg.cho_solve(factor, np.eye(gram.shape[0]))


def _inverse_error(gram: np.ndarray, inverse: np.ndarray) -> float:
    return float(np.linalg.norm(gram @ inverse - np.eye(gram.shape[0]), "fro"))


@dataclasses.dataclass(frozen=True)
class RecursiveCache:
    """Accumulated moments of all lifted data absorbed so far.

    The least-squares solutions are recovered as ``[A, B] = V_ab · G_ab⁻¹``
    and ``C = V_c · G_c⁻¹``. A cache is exclusively owned by one update
    stream, every update returns a new instance.
    """

    V_ab: np.ndarray
    """``r×(r+m)`` cross moment ``Σ Ḡ χᵀ``."""

    G_ab: np.ndarray
    """``(r+m)×(r+m)`` Gram matrix ``Σ χ χᵀ``."""

    G_ab_inv: typing.Optional[np.ndarray]

    V_c: np.ndarray
    """``n×r`` cross moment ``Σ X Gᵀ``."""

    G_c: np.ndarray
    """``r×r`` Gram matrix ``Σ G Gᵀ``."""

    G_c_inv: typing.Optional[np.ndarray]

    batches_absorbed: int = 0

    inverse_rebuilds: int = 0
    """How often a drifting inverse was recomputed from its Gram matrix."""

    refit_fallbacks: int = 0
    """How often the block update was replaced by a direct refit."""

    @property
    def r(self) -> int:
        return self.G_c.shape[0]

    @property
    def m(self) -> int:
        return self.G_ab.shape[0] - self.G_c.shape[0]

    @property
    def n(self) -> int:
        return self.V_c.shape[0]

    @classmethod
    def empty(cls, n: int, r: int, m: int) -> RecursiveCache:
        """A cache that has not absorbed any data. Its inverses are undefined."""
        return cls(
            V_ab=np.zeros((r, r + m)),
            G_ab=np.zeros((r + m, r + m)),
            G_ab_inv=None,
            V_c=np.zeros((n, r)),
            G_c=np.zeros((r, r)),
            G_c_inv=None,
        )

    @classmethod
    def seed(
        cls,
        G: np.ndarray,
        G_bar: np.ndarray,
        U: typing.Optional[np.ndarray],
        X: np.ndarray,
    ) -> RecursiveCache:
        """Cache holding the moments of a single full-rank batch."""
        G = np.asarray(G, dtype=float)
        X = np.asarray(X, dtype=float)
        U = _as_inputs(U, G.shape[1])
        return cls.empty(X.shape[0], G.shape[0], U.shape[0]).absorb(G, G_bar, U, X)

    def absorb(
        self,
        G: np.ndarray,
        G_bar: np.ndarray,
        U: typing.Optional[np.ndarray],
        X: np.ndarray,
    ) -> RecursiveCache:
        """Accumulate a batch and recompute both inverses by Cholesky factorization.

        :raises RankDeficiencyError: If an accumulated Gram matrix is not
            positive definite.
        """
        G = np.asarray(G, dtype=float)
        G_bar = np.asarray(G_bar, dtype=float)
        X = np.asarray(X, dtype=float)
        U = _as_inputs(U, G.shape[1])
        _check_batch_dims(G, G_bar, U, X)
        chi = np.vstack([G, U])
        return dataclasses.replace(
            self,
            V_ab=self.V_ab + G_bar @ chi.T,
            G_ab=self.G_ab + chi @ chi.T,
            V_c=self.V_c + X @ G.T,
            G_c=self.G_c + G @ G.T,
            batches_absorbed=self.batches_absorbed + 1,
        ).refreshed()

    def refreshed(self) -> RecursiveCache:
        """Recompute both inverses from the accumulated Gram matrices.

        :raises RankDeficiencyError: If a Gram matrix is not positive definite.
        """
        try:
            G_ab_inv = _spd_inverse(self.G_ab)
            G_c_inv = _spd_inverse(self.G_c)
        except scipy.linalg.LinAlgError as e:
            raise RankDeficiencyError(
                f"accumulated Gram matrix of {self.batches_absorbed} batches "
                "is not positive definite"
            ) from e
        return dataclasses.replace(self, G_ab_inv=G_ab_inv, G_c_inv=G_c_inv)

    def matrices(self) -> KoopmanMatrices:
        """Least-squares solution over everything absorbed."""
        if self.G_ab_inv is None or self.G_c_inv is None:
            raise PreconditionError("the cache has not absorbed any data")
        return KoopmanMatrices.from_blocks(
            self.V_ab @ self.G_ab_inv, self.V_c @ self.G_c_inv
        )


def recursive_update(
    cache: RecursiveCache,
    current: KoopmanMatrices,
    G_new: np.ndarray,
    G_bar_new: np.ndarray,
    U_new: typing.Optional[np.ndarray],
    X_new: np.ndarray,
) -> tuple[KoopmanMatrices, RecursiveCache]:
    """Fold a new batch into ``current`` with the Woodbury block identity.

    With ``P = G_ab⁻¹`` and ``χ = [G_new; U_new]`` the update forms the one
    ``β×β`` inverse ``λ = (I + χᵀPχ)⁻¹`` and computes::

        [A, B]' = [A, B] + (Ḡ − [A, B]χ) · λ · χᵀP
        P'      = P − Pχ · λ · χᵀP

    ``G_c'⁻¹`` is the Schur complement of ``P'``'s input block, so ``C`` is
    refreshed without a second ``β×β`` inverse::

        C' = C + (X − CG) · Gᵀ · G_c'⁻¹

    The result equals :func:`fit_batch` on all absorbed data, provided
    ``current`` is the solution belonging to ``cache``.

    :param cache: Moments of everything absorbed so far.
    :param current: The solution belonging to ``cache``.

    :return: The refreshed matrices and the cache including the new batch.
    """
    if cache.G_ab_inv is None or cache.G_c_inv is None:
        raise PreconditionError("recursive_update needs a seeded cache")
    G = np.asarray(G_new, dtype=float)
    G_bar = np.asarray(G_bar_new, dtype=float)
    X = np.asarray(X_new, dtype=float)
    U = _as_inputs(U_new, G.shape[1])
    _check_batch_dims(G, G_bar, U, X)
    if G.shape[0] != cache.r or U.shape[0] != cache.m or X.shape[0] != cache.n:
        raise DimensionError(
            f"batch dimensions (n={X.shape[0]}, r={G.shape[0]}, m={U.shape[0]}) "
            f"do not match the cache (n={cache.n}, r={cache.r}, m={cache.m})"
        )
    r = cache.r
    beta = G.shape[1]
    chi = np.vstack([G, U])

    V_ab = cache.V_ab + G_bar @ chi.T
    G_ab = cache.G_ab + chi @ chi.T
    V_c = cache.V_c + X @ G.T
    G_c = cache.G_c + G @ G.T
    moments = dataclasses.replace(
        cache,
        V_ab=V_ab,
        G_ab=G_ab,
        V_c=V_c,
        G_c=G_c,
        batches_absorbed=cache.batches_absorbed + 1,
    )

    P = cache.G_ab_inv
    P_chi = P @ chi
    try:
        lam = scipy.linalg.inv(np.eye(beta) + chi.T @ P_chi)
        if not np.all(np.isfinite(lam)):
            raise scipy.linalg.LinAlgError("non-finite λ")
    except scipy.linalg.LinAlgError:
        log.warning(
            "λ inversion failed on a %d-column batch, refitting from moments", beta
        )
        fallback = dataclasses.replace(
            moments.refreshed(), refit_fallbacks=cache.refit_fallbacks + 1
        )
        return fallback.matrices(), fallback

    gain = lam @ P_chi.T
    AB = current.AB + (G_bar - current.AB @ chi) @ gain
    P_new = P - P_chi @ gain
    P_new = 0.5 * (P_new + P_new.T)

    if cache.m > 0:
        P11 = P_new[:r, :r]
        P12 = P_new[:r, r:]
        P22 = P_new[r:, r:]
        G_c_inv = P11 - P12 @ scipy.linalg.solve(P22, P12.T, assume_a="sym")
    else:
        G_c_inv = P_new.copy()
    C = current.C + (X - current.C @ G) @ G.T @ G_c_inv

    rebuilds = cache.inverse_rebuilds
    rebuilt = False
    if _inverse_error(G_ab, P_new) >= INVERSE_TOLERANCE:
        log.warning("Gram inverse of [G;U] drifted, rebuilding it")
        P_new = _spd_inverse(G_ab)
        rebuilds += 1
        rebuilt = True
    if _inverse_error(G_c, G_c_inv) >= INVERSE_TOLERANCE:
        log.warning("Gram inverse of G drifted, rebuilding it")
        G_c_inv = _spd_inverse(G_c)
        rebuilds += 1
        rebuilt = True

    updated = dataclasses.replace(
        moments,
        G_ab_inv=P_new,
        G_c_inv=G_c_inv,
        inverse_rebuilds=rebuilds,
    )
    if rebuilt:
        return updated.matrices(), updated
    return KoopmanMatrices.from_blocks(AB, C), updated
