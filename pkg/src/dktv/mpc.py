"""Receding-horizon control on the lifted linear model.

Over a horizon of ``l`` steps the controller minimizes::

    J = Σ_{i=0}^{l−1} ḡ_iᵀ·Q̃·ḡ_i + u_iᵀ·R·u_i  +  ḡ_lᵀ·Q_l·ḡ_l

with ``ḡ_i = g(x_i) − g(x*)``, ``Q̃ = CᵀQC`` and the lifted prediction
``z_{i+1} = A·z_i + B·u_i``. The predictions are condensed into a dense
quadratic in the stacked inputs, solved directly and, when input bounds
or soft state bounds are active, refined by accelerated projected gradient.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing

import numpy as np
import scipy.linalg

from dktv import PreconditionError
from dktv.core import DkrSnapshot, OnlineDktv
from dktv.systems import (
    SAMPLE_INTERVAL,
    Cartpole,
    CartpoleExcitation,
    cart_friction,
    integrate,
    sample_trajectory,
)

log: logging.Logger = logging.getLogger(__name__)


def _box(
    value: typing.Optional[typing.Sequence[float] | np.ndarray], size: int, fill: float
) -> np.ndarray:
    if value is None:
        return np.full(size, fill)
    array = np.asarray(value, dtype=float).ravel()
    if array.size == 1:
        return np.full(size, float(array[0]))
    if array.size != size:
        raise PreconditionError(f"bound must have {size} entries, got {array.size}")
    return array


@dataclasses.dataclass(frozen=True)
class MpcProblem:
    Q: np.ndarray
    """``n×n`` state weight, positive semidefinite."""

    R: np.ndarray
    """``m×m`` input weight, positive definite."""

    horizon: int = 10
    goal: typing.Optional[np.ndarray] = None
    """Goal state ``x*``, the origin by default."""

    u_min: typing.Optional[np.ndarray] = None
    u_max: typing.Optional[np.ndarray] = None
    x_min: typing.Optional[np.ndarray] = None
    """Soft lower state bound, enforced by a quadratic penalty."""

    x_max: typing.Optional[np.ndarray] = None
    Q_terminal: typing.Optional[np.ndarray] = None
    """``r×r`` lifted terminal weight, ``terminal_weight·Q̃`` by default."""

    terminal_weight: float = 1.0
    penalty_weight: float = 1e4
    max_iterations: int = 200
    tolerance: float = 1e-8

    def __post_init__(self) -> None:
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if self.horizon < 1:
            raise PreconditionError("the horizon must be at least one step")
        try:
            scipy.linalg.cholesky(0.5 * (R + R.T))
        except scipy.linalg.LinAlgError as e:
            raise PreconditionError("R must be positive definite") from e
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
            raise PreconditionError("Q must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def goal_state(self) -> np.ndarray:
        return np.zeros(self.n) if self.goal is None else np.asarray(self.goal, dtype=float)

    @property
    def has_state_bounds(self) -> bool:
        return self.x_min is not None or self.x_max is not None


@dataclasses.dataclass(frozen=True)
class LiftedQp:
    """Condensed quadratic ``½·UᵀHU + fᵀU + constant`` in the stacked inputs."""

    H: np.ndarray
    f: np.ndarray
    constant: float
    Phi: np.ndarray
    """``(l·r)×r`` free response, block ``i`` is ``A^{i+1}``."""

    Gamma: np.ndarray
    """``(l·r)×(l·m)`` forced response."""

    Q_bar: np.ndarray
    z0: np.ndarray
    z_star: np.ndarray
    C: np.ndarray
    horizon: int
    m: int

    def objective(self, U: np.ndarray) -> float:
        U = np.asarray(U, dtype=float).ravel()
        return float(0.5 * U @ self.H @ U + self.f @ U + self.constant)

    def predicted_lifted(self, U: np.ndarray) -> np.ndarray:
        """``r×l`` lifted predictions ``z_1 … z_l``."""
        Z = self.Phi @ self.z0 + self.Gamma @ np.asarray(U, dtype=float).ravel()
        return Z.reshape(self.horizon, -1).T


def build_lifted_qp(
    snapshot: DkrSnapshot, x_now: np.ndarray, problem: MpcProblem
) -> LiftedQp:
    """Condense the lifted dynamics of ``snapshot`` over the horizon.

    :raises PreconditionError: If the horizon exceeds the batch size ``β``.
    """
    l = problem.horizon
    if snapshot.beta and l > snapshot.beta:
        raise PreconditionError(
            f"horizon l={l} exceeds the batch size β={snapshot.beta}"
        )
    M = snapshot.matrices
    r, m = M.r, M.m
    if problem.n != M.n or problem.m != m:
        raise PreconditionError(
            f"problem dimensions (n={problem.n}, m={problem.m}) do not match the model "
            f"(n={M.n}, m={m})"
        )
    x_now = np.asarray(x_now, dtype=float)
    z0 = snapshot.net.forward(x_now)
    z_star = snapshot.net.forward(problem.goal_state())
    Q_tilde = M.C.T @ problem.Q @ M.C
    Q_l = (
        problem.terminal_weight * Q_tilde
        if problem.Q_terminal is None
        else np.asarray(problem.Q_terminal, dtype=float)
    )

    Phi = np.zeros((l * r, r))
    Gamma = np.zeros((l * r, l * m))
    powers = [np.eye(r)]
    for i in range(l):
        powers.append(powers[-1] @ M.A)
    for i in range(l):
        Phi[i * r : (i + 1) * r] = powers[i + 1]
        for j in range(i + 1):
            Gamma[i * r : (i + 1) * r, j * m : (j + 1) * m] = powers[i - j] @ M.B
    Q_bar = scipy.linalg.block_diag(*([Q_tilde] * (l - 1) + [Q_l]))
    R_bar = scipy.linalg.block_diag(*([problem.R] * l))
    Z_star = np.tile(z_star, l)
    offset = Phi @ z0 - Z_star
    H = 2.0 * (Gamma.T @ Q_bar @ Gamma + R_bar)
    f = 2.0 * Gamma.T @ Q_bar @ offset
    d0 = z0 - z_star
    constant = float(offset @ Q_bar @ offset + d0 @ Q_tilde @ d0)
    return LiftedQp(
        H=0.5 * (H + H.T),
        f=f,
        constant=constant,
        Phi=Phi,
        Gamma=Gamma,
        Q_bar=Q_bar,
        z0=z0,
        z_star=z_star,
        C=M.C,
        horizon=l,
        m=m,
    )


def explicit_cost(
    snapshot: DkrSnapshot, x_now: np.ndarray, U: np.ndarray, problem: MpcProblem
) -> float:
    """``J`` by an explicit lifted rollout, without condensing."""
    M = snapshot.matrices
    U = np.asarray(U, dtype=float).reshape(problem.horizon, M.m)
    z_star = snapshot.net.forward(problem.goal_state())
    Q_tilde = M.C.T @ problem.Q @ M.C
    Q_l = (
        problem.terminal_weight * Q_tilde
        if problem.Q_terminal is None
        else np.asarray(problem.Q_terminal, dtype=float)
    )
    z = snapshot.net.forward(np.asarray(x_now, dtype=float))
    cost = 0.0
    for i in range(problem.horizon):
        d = z - z_star
        cost += float(d @ Q_tilde @ d + U[i] @ problem.R @ U[i])
        z = M.A @ z + M.B @ U[i]
    d = z - z_star
    return cost + float(d @ Q_l @ d)


@dataclasses.dataclass(frozen=True)
class MpcSolution:
    U: np.ndarray
    """``m×l`` planned inputs, column ``i`` is ``u_i``."""

    cost: float
    iterations: int
    converged: bool


def _state_penalty(
    qp: LiftedQp, problem: MpcProblem, U: np.ndarray
) -> tuple[float, np.ndarray]:
    if not problem.has_state_bounds:
        return 0.0, np.zeros_like(U)
    n = qp.C.shape[0]
    lower = _box(problem.x_min, n, -math.inf)
    upper = _box(problem.x_max, n, math.inf)
    states = qp.C @ qp.predicted_lifted(U)
    excess = np.maximum(states - upper[:, None], 0.0) - np.maximum(
        lower[:, None] - states, 0.0
    )
    value = problem.penalty_weight * float(np.sum(excess * excess))
    d_states = 2.0 * problem.penalty_weight * excess
    d_lifted = (qp.C.T @ d_states).T.ravel()
    return value, qp.Gamma.T @ d_lifted


def solve_horizon(qp: LiftedQp, problem: MpcProblem) -> MpcSolution:
    """Minimize the condensed cost over the stacked inputs.

    The unconstrained minimizer comes from a Cholesky solve. If it leaves
    the input box, or soft state bounds are set, accelerated projected
    gradient with step ``1/L`` refines it until the projected-gradient
    norm falls below ``problem.tolerance``. Without convergence the best
    iterate is returned with ``converged=False``.
    """
    size = qp.H.shape[0]
    m = qp.m
    lower = np.tile(_box(problem.u_min, m, -math.inf), qp.horizon)
    upper = np.tile(_box(problem.u_max, m, math.inf), qp.horizon)
    unconstrained = scipy.linalg.cho_solve(scipy.linalg.cho_factor(qp.H), -qp.f)

    def shape(U: np.ndarray) -> np.ndarray:
        return U.reshape(qp.horizon, m).T

    def total(U: np.ndarray) -> float:
        return qp.objective(U) + _state_penalty(qp, problem, U)[0]

    inside = bool(np.all(unconstrained >= lower) and np.all(unconstrained <= upper))
    if inside and not problem.has_state_bounds:
        return MpcSolution(shape(unconstrained), qp.objective(unconstrained), 0, True)

    lipschitz = float(np.max(np.linalg.eigvalsh(qp.H)))
    if problem.has_state_bounds:
        CG = np.kron(np.eye(qp.horizon), qp.C) @ qp.Gamma
        lipschitz += 2.0 * problem.penalty_weight * float(np.linalg.norm(CG, 2)) ** 2
    step = 1.0 / lipschitz

    U = np.clip(unconstrained, lower, upper)
    best, best_cost = U, total(U)
    Y, t = U.copy(), 1.0
    for iteration in range(1, problem.max_iterations + 1):
        grad = qp.H @ Y + qp.f + _state_penalty(qp, problem, Y)[1]
        U_next = np.clip(Y - step * grad, lower, upper)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        Y = U_next + (t - 1.0) / t_next * (U_next - U)
        if total(U_next) > total(U):
            # restart the momentum when the cost goes up
            Y, t_next = U_next.copy(), 1.0
        U, t = U_next, t_next
        cost = total(U)
        if cost < best_cost:
            best, best_cost = U, cost
        full_grad = qp.H @ U + qp.f + _state_penalty(qp, problem, U)[1]
        projected = U - np.clip(U - full_grad, lower, upper)
        if float(np.linalg.norm(projected)) < problem.tolerance:
            return MpcSolution(shape(U), cost, iteration, True)
    log.debug("projected gradient stopped at the iteration cap")
    return MpcSolution(shape(best), best_cost, problem.max_iterations, False)


@dataclasses.dataclass(frozen=True)
class ClosedLoopResult:
    times: np.ndarray
    states: np.ndarray
    """``n×K`` states at which the controller acted."""

    inputs: np.ndarray
    mu_c: np.ndarray
    iterations: np.ndarray
    costs: np.ndarray
    failed: bool
    """The pole fell past ``π/2``."""

    model_updates: int

    @property
    def max_abs_theta(self) -> float:
        return float(np.max(np.abs(self.states[2]))) if self.states.size else 0.0

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if self.times.size else 0.0


def pretrain_learner(
    learner: OnlineDktv,
    cartpole: Cartpole,
    n_steps: int,
    seed: typing.Optional[int] = None,
    noise: float = 1.0,
    x0: typing.Optional[np.ndarray] = None,
) -> np.ndarray:
    """Feed an excitation trajectory around the upright position into ``learner``.

    The trajectory is recorded with the cart friction frozen at its initial
    value. Returns the state the closed loop continues from, the last
    simulated sample, which is left for the caller to observe with the
    input it actually applies.
    """
    frozen = Cartpole(dataclasses.replace(cartpole.config, friction_rate=0.0))
    controller = CartpoleExcitation(frozen, noise=noise, seed=seed)
    start = np.array([0.0, 0.0, 0.05, 0.0]) if x0 is None else np.asarray(x0, dtype=float)
    trajectory = sample_trajectory(frozen, controller, start, n_steps=n_steps, seed=seed)
    learner.fit_stream(trajectory.states[:, :-1], trajectory.inputs[:, :-1])
    return trajectory.states[:, -1]


def receding_horizon_run(
    cartpole: Cartpole,
    learner: OnlineDktv,
    problem: MpcProblem,
    duration: float,
    x0: np.ndarray,
    dt: float = SAMPLE_INTERVAL,
) -> ClosedLoopResult:
    """Closed loop: solve, apply ``u_0``, observe, and refresh the model every ``β`` samples.

    The run stops early with ``failed=True`` when ``|θ̄| > π/2``.
    """
    x = np.asarray(x0, dtype=float)
    n_steps = int(round(duration / dt))
    times, states, inputs, mu_c, iterations, costs = [], [], [], [], [], []
    updates = 0
    failed = False
    for k in range(n_steps):
        t = k * dt
        if abs(x[2]) > math.pi / 2:
            log.warning("the pole fell at t=%.1f s (θ̄=%.3f)", t, x[2])
            failed = True
            break
        snapshot = learner.current
        if snapshot is None:
            raise PreconditionError("the learner needs a pre-trained model")
        solution = solve_horizon(build_lifted_qp(snapshot, x, problem), problem)
        u = solution.U[:, 0]
        times.append(t)
        states.append(x)
        inputs.append(u)
        mu_c.append(cart_friction(t, cartpole.config))
        iterations.append(solution.iterations)
        costs.append(solution.cost)
        if learner.observe(x, u) is not None:
            updates += 1
            log.info("model refreshed at t=%.1f s (batch %d)", t, learner.current.tau)
        x = integrate(cartpole, x, u, t, dt)
    if not failed and abs(x[2]) > math.pi / 2:
        failed = True
    m = problem.m
    return ClosedLoopResult(
        times=np.array(times),
        states=np.column_stack(states) if states else np.zeros((problem.n, 0)),
        inputs=np.column_stack(inputs) if inputs else np.zeros((m, 0)),
        mu_c=np.array(mu_c),
        iterations=np.array(iterations, dtype=int),
        costs=np.array(costs),
        failed=failed,
        model_updates=updates,
    )
