"""Reference simulators and the data-gathering controllers that excite them.

Three systems generate the training streams:

* :class:`SimpleNtvs`, the planar field ``ẋ = M_t cos(x)`` whose rotation
  rate ``1 + γt`` grows linearly in time,
* :class:`Quadcopter`, a 12-state rigid body pushed by a random force
  disturbance,
* :class:`Cartpole`, the classic pole balancing plant whose cart friction
  grows while the simulation runs.

All of them are sampled every ``dt = 0.1 s`` and integrated with classical
Runge-Kutta on ``dt/10`` substeps, inputs and disturbances held constant
over each sampling interval.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing
from collections.abc import Callable

import numpy as np
import scipy.linalg

from dktv import DimensionError, PreconditionError, SimulationError, SingularityError

log: logging.Logger = logging.getLogger(__name__)

SAMPLE_INTERVAL: float = 0.1
"""Sampling interval ``dt`` of all experiments in seconds."""

SUBSTEPS: int = 10

Deriv = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
"""``f(x, u, t) → ẋ``."""


# Simple time-varying system ################################################


@dataclasses.dataclass(frozen=True)
class SimpleNtvsConfig:
    gamma: float = 0.8
    """How fast the dynamics change."""

    x0: tuple[float, float] = (1.0, 0.0)


def simple_ntvs_deriv(x: np.ndarray, t: float, gamma: float) -> np.ndarray:
    """``ẋ = M_t cos(x)`` with ``M_t = [[0, 1+γt], [−(1+γt), 0]]``."""
    c = np.cos(np.asarray(x, dtype=float))
    rate = 1.0 + gamma * t
    return np.array([rate * c[1], -rate * c[0]])


# Quadcopter #################################################################


@dataclasses.dataclass(frozen=True)
class QuadConfig:
    mass: float = 1.0
    Jx: float = 0.01
    Jy: float = 0.01
    Jz: float = 0.02
    gravity: float = 9.81
    disturbance_scale: float = 1.0
    """Standard deviation of every component of the force disturbance ``w_t``."""

    seed: int = 0
    standard_rotation: bool = False
    """Use the textbook body-to-inertial rotation. The default matrix
    repeats ``c_θc_ψ`` in its second row."""

    def __post_init__(self) -> None:
        if min(self.mass, self.Jx, self.Jy, self.Jz) <= 0.0:
            raise PreconditionError("mass and inertias must be positive")

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


QUAD_STATE_NAMES: tuple[str, ...] = (
    "p_n",
    "p_e",
    "z",
    "u",
    "v",
    "w",
    "phi",
    "theta",
    "psi",
    "p",
    "q",
    "r",
)
"""Positions (north, east, altitude), body velocities, Euler angles, body rates."""

QUAD_INPUT_NAMES: tuple[str, ...] = ("F", "tau_phi", "tau_theta", "tau_psi")


def _rotation(phi: float, theta: float, psi: float, standard: bool) -> np.ndarray:
    sf, cf = math.sin(phi), math.cos(phi)
    st, ct = math.sin(theta), math.cos(theta)
    sp, cp = math.sin(psi), math.cos(psi)
    return np.array(
        [
            [ct * cp, sf * st * cp - cf * sp, cf * st * cp + sf * sp],
            [ct * sp if standard else ct * cp, sf * st * sp + cf * cp, cf * st * sp - sf * cp],
            [st, -sf * ct, -cf * ct],
        ]
    )


def quad_deriv(
    x: np.ndarray,
    u: np.ndarray,
    t: float,
    w: typing.Optional[np.ndarray] = None,
    config: QuadConfig = QuadConfig(),
) -> np.ndarray:
    """Quadcopter dynamics with thrust ``F`` along the negative body z axis.

    The body force is gravity expressed in the body frame plus thrust,
    ``f = m·g·(−s_θ, c_θs_φ, c_θc_φ) + (0, 0, −F)``, so hover needs
    ``F = m·g``. ``w`` adds to ``f`` before dividing by the mass.

    :raises SingularityError: If the pitch angle reaches ``±π/2``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (12,) or u.shape != (4,):
        raise DimensionError(f"expected a 12-state and 4 inputs, got {x.shape} and {u.shape}")
    w = np.zeros(3) if w is None else np.asarray(w, dtype=float)
    _, _, _, vu, vv, vw, phi, theta, psi, p, q, r = x
    thrust, tau_phi, tau_theta, tau_psi = u
    ct = math.cos(theta)
    if abs(ct) < 1e-6:
        raise SingularityError(f"pitch angle θ={theta:.6g} is at the gimbal singularity")
    sf, cf = math.sin(phi), math.cos(phi)
    st, tt = math.sin(theta), math.tan(theta)

    velocity = np.array([vu, vv, vw])
    position_rate = _rotation(phi, theta, psi, config.standard_rotation) @ velocity
    euler_rate = np.array(
        [
            [1.0, sf * tt, cf * tt],
            [0.0, cf, -sf],
            [0.0, sf / ct, cf / ct],
        ]
    ) @ np.array([p, q, r])
    mg = config.mass * config.gravity
    force = np.array([-mg * st, mg * ct * sf, mg * ct * cf - thrust])
    acceleration = np.array(
        [r * vv - q * vw, p * vw - r * vu, q * vu - p * vv]
    ) + (force + w) / config.mass
    J = config
    angular = np.array(
        [
            (J.Jy - J.Jz) / J.Jx * q * r + tau_phi / J.Jx,
            (J.Jz - J.Jx) / J.Jy * p * r + tau_theta / J.Jy,
            (J.Jx - J.Jy) / J.Jz * p * q + tau_psi / J.Jz,
        ]
    )
    return np.concatenate([position_rate, acceleration, euler_rate, angular])


# Cartpole ###################################################################

FrictionLaw = typing.Literal["monotone", "oscillatory"]


@dataclasses.dataclass(frozen=True)
class CartpoleConfig:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    length: float = 0.5
    """Half the pole length, the distance from the pivot to its center of mass."""

    mu_p: float = 0.000002
    """Friction coefficient of the pole on the cart."""

    mu_c0: float = 0.0005
    """Initial friction coefficient of the cart on the track."""

    gravity: float = -9.8
    """Signed gravitational acceleration, negative pointing down."""

    friction_rate: float = 0.3
    friction_law: FrictionLaw = "monotone"
    """``monotone`` integrates ``μ̇ = rate·|cos t|``, ``oscillatory`` integrates
    ``μ̇ = rate·cos t``."""

    def __post_init__(self) -> None:
        if min(self.cart_mass, self.pole_mass, self.length) <= 0.0:
            raise PreconditionError("masses and pole length must be positive")
        if self.friction_law not in typing.get_args(FrictionLaw):
            raise PreconditionError(f"unknown friction law {self.friction_law!r}")


CARTPOLE_STATE_NAMES: tuple[str, ...] = ("x", "xdot", "theta", "thetadot")


def _integral_abs_cos(t: float) -> float:
    half_periods = math.floor(t / math.pi)
    rest = t - half_periods * math.pi
    partial = math.sin(rest) if rest <= math.pi / 2 else 2.0 - math.sin(rest)
    return 2.0 * half_periods + partial


def cart_friction(t: float, config: CartpoleConfig = CartpoleConfig()) -> float:
    """Friction coefficient ``μ_c(t)`` of the cart on the track.

    The monotone law reaches about ``14.3`` after 75 s with the default rate.
    """
    if config.friction_law == "oscillatory":
        return config.mu_c0 + config.friction_rate * math.sin(t)
    return config.mu_c0 + config.friction_rate * _integral_abs_cos(t)


def cartpole_deriv(
    x: np.ndarray, F: float, t: float, config: CartpoleConfig = CartpoleConfig()
) -> np.ndarray:
    """Derivative of ``(x, ẋ, θ̄, θ̄̇)`` with ``θ̄`` measured from the upright position."""
    _, xdot, theta, thetadot = np.asarray(x, dtype=float)
    F = float(np.asarray(F, dtype=float).reshape(-1)[0]) if np.ndim(F) else float(F)
    g = -config.gravity
    total_mass = config.cart_mass + config.pole_mass
    ml = config.pole_mass * config.length
    sin, cos = math.sin(theta), math.cos(theta)
    friction = cart_friction(t, config) * float(np.sign(xdot))
    temp = (-F - ml * thetadot * thetadot * sin + friction) / total_mass
    theta_acc = (g * sin + cos * temp - config.mu_p * thetadot / ml) / (
        config.length * (4.0 / 3.0 - config.pole_mass * cos * cos / total_mass)
    )
    x_acc = (
        F + ml * (thetadot * thetadot * sin - theta_acc * cos) - friction
    ) / total_mass
    return np.array([xdot, x_acc, thetadot, theta_acc])


def cartpole_energy(x: np.ndarray, config: CartpoleConfig = CartpoleConfig()) -> float:
    """Mechanical energy of the cartpole, constant without friction and input."""
    _, xdot, theta, thetadot = np.asarray(x, dtype=float)
    m = config.pole_mass
    l = config.length
    return (
        0.5 * (config.cart_mass + m) * xdot * xdot
        + m * l * math.cos(theta) * xdot * thetadot
        + 2.0 / 3.0 * m * l * l * thetadot * thetadot
        + m * (-config.gravity) * l * math.cos(theta)
    )


# Systems ####################################################################


class DynamicalSystem(typing.Protocol):
    name: str
    n: int
    m: int
    disturbance_dim: int

    def deriv(
        self, x: np.ndarray, u: np.ndarray, t: float, w: typing.Optional[np.ndarray] = None
    ) -> np.ndarray: ...

    def draw_disturbance(self, rng: np.random.Generator) -> np.ndarray: ...


class SimpleNtvs:
    name = "simple-ntvs"
    n = 2
    m = 0
    disturbance_dim = 0

    def __init__(self, config: SimpleNtvsConfig = SimpleNtvsConfig()) -> None:
        self.config = config

    def deriv(
        self, x: np.ndarray, u: np.ndarray, t: float, w: typing.Optional[np.ndarray] = None
    ) -> np.ndarray:
        return simple_ntvs_deriv(x, t, self.config.gamma)

    def draw_disturbance(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(0)


class Quadcopter:
    name = "quadcopter"
    n = 12
    m = 4
    disturbance_dim = 3

    def __init__(self, config: QuadConfig = QuadConfig()) -> None:
        self.config = config

    def deriv(
        self, x: np.ndarray, u: np.ndarray, t: float, w: typing.Optional[np.ndarray] = None
    ) -> np.ndarray:
        return quad_deriv(x, u, t, w, self.config)

    def draw_disturbance(self, rng: np.random.Generator) -> np.ndarray:
        return self.config.disturbance_scale * rng.standard_normal(3)


class Cartpole:
    name = "cartpole"
    n = 4
    m = 1
    disturbance_dim = 0

    def __init__(self, config: CartpoleConfig = CartpoleConfig()) -> None:
        self.config = config

    def deriv(
        self, x: np.ndarray, u: np.ndarray, t: float, w: typing.Optional[np.ndarray] = None
    ) -> np.ndarray:
        return cartpole_deriv(x, float(np.asarray(u).reshape(-1)[0]), t, self.config)

    def draw_disturbance(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(0)


# Integration ################################################################


def rk4_step(deriv: Deriv, x: np.ndarray, u: np.ndarray, t: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` held over ``[t, t+dt]``.

    :raises SimulationError: If the result is not finite.
    """
    if dt <= 0.0:
        raise PreconditionError(f"the step size must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    k1 = deriv(x, u, t)
    k2 = deriv(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = deriv(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = deriv(x + dt * k3, u, t + dt)
    result = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(result)):
        raise SimulationError(f"integration produced non-finite states at t={t:.6g}")
    return result


def integrate(
    system: DynamicalSystem,
    x: np.ndarray,
    u: np.ndarray,
    t: float,
    dt: float = SAMPLE_INTERVAL,
    w: typing.Optional[np.ndarray] = None,
    substeps: int = SUBSTEPS,
) -> np.ndarray:
    """Advance ``system`` by one sampling interval on ``substeps`` RK4 substeps."""

    def deriv(x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        return system.deriv(x, u, t, w)

    h = dt / substeps
    for i in range(substeps):
        x = rk4_step(deriv, x, u, t + i * h, h)
    return x


InputSource = Callable[[int, float, np.ndarray], np.ndarray]
"""``u_k = source(k, t_k, x_k)``."""


@dataclasses.dataclass(frozen=True)
class SampledTrajectory:
    times: np.ndarray
    states: np.ndarray
    """``n×N`` states."""

    inputs: np.ndarray
    """``m×N`` inputs, ``u_k`` held from ``t_k`` to ``t_{k+1}``."""

    dt: float = SAMPLE_INTERVAL
    disturbances: typing.Optional[np.ndarray] = None
    """``d×(N−1)`` disturbance held over each interval."""

    truncated: bool = False
    """The simulation failed before ``n_steps`` and was cut at the last good sample."""

    @property
    def n_samples(self) -> int:
        return self.states.shape[1]


def constant_input(u: typing.Sequence[float]) -> InputSource:
    value = np.asarray(u, dtype=float)

    def source(k: int, t: float, x: np.ndarray) -> np.ndarray:
        return value

    return source


def sample_trajectory(
    system: DynamicalSystem,
    input_source: typing.Optional[InputSource],
    x0: typing.Sequence[float] | np.ndarray,
    dt: float = SAMPLE_INTERVAL,
    n_steps: int = 100,
    seed: typing.Optional[int] = None,
    substeps: int = SUBSTEPS,
    t0: float = 0.0,
) -> SampledTrajectory:
    """Simulate ``n_steps`` sampling intervals and record ``n_steps + 1`` samples.

    A disturbance is drawn once per interval from a generator seeded with
    ``seed``. If the integration blows up the trajectory is truncated and
    flagged instead of raising.
    """
    if n_steps < 0:
        raise PreconditionError("n_steps must not be negative")
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float)
    if x.shape != (system.n,):
        raise DimensionError(f"x0 must have {system.n} entries, got shape {x.shape}")
    if input_source is None:
        input_source = constant_input(np.zeros(system.m))
    times = [t0]
    states = [x]
    inputs = []
    disturbances = []
    truncated = False
    for k in range(n_steps + 1):
        t = t0 + k * dt
        u = np.asarray(input_source(k, t, x), dtype=float).reshape(system.m)
        inputs.append(u)
        if k == n_steps:
            break
        w = system.draw_disturbance(rng)
        try:
            x = integrate(system, x, u, t, dt, w, substeps)
        except (SimulationError, SingularityError) as e:
            log.warning("%s simulation stopped after %d samples: %s", system.name, k + 1, e)
            truncated = True
            break
        disturbances.append(w)
        times.append(t0 + (k + 1) * dt)
        states.append(x)
    N = len(states)
    return SampledTrajectory(
        times=np.array(times),
        states=np.column_stack(states),
        inputs=np.column_stack(inputs[:N]) if system.m else np.zeros((0, N)),
        dt=dt,
        disturbances=(
            np.column_stack(disturbances)
            if disturbances and system.disturbance_dim
            else np.zeros((system.disturbance_dim, len(disturbances)))
        ),
        truncated=truncated,
    )


# Data-gathering controllers #################################################


def linearize(
    system: DynamicalSystem,
    x0: np.ndarray,
    u0: np.ndarray,
    t: float = 0.0,
    h: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time Jacobians ``(∂f/∂x, ∂f/∂u)`` by central differences."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    A = np.zeros((system.n, system.n))
    B = np.zeros((system.n, system.m))
    for i in range(system.n):
        e = np.zeros(system.n)
        e[i] = h
        A[:, i] = (system.deriv(x0 + e, u0, t) - system.deriv(x0 - e, u0, t)) / (2 * h)
    for j in range(system.m):
        e = np.zeros(system.m)
        e[j] = h
        B[:, j] = (system.deriv(x0, u0 + e, t) - system.deriv(x0, u0 - e, t)) / (2 * h)
    return A, B


def discretize(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization through the exponential of the augmented matrix."""
    n, m = B.shape
    augmented = np.zeros((n + m, n + m))
    augmented[:n, :n] = A
    augmented[:n, n:] = B
    phi = scipy.linalg.expm(augmented * dt)
    return phi[:n, :n], phi[:n, n:]


def lqr_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Discrete infinite-horizon LQR gain ``K`` for ``u = −Kx``."""
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return scipy.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def smooth_ramp(
    start: np.ndarray, goal: np.ndarray, duration: float
) -> Callable[[float], np.ndarray]:
    """Reference moving from ``start`` to ``goal`` along ``3s² − 2s³`` in ``duration`` seconds."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)

    def reference(t: float) -> np.ndarray:
        s = min(max(t / duration, 0.0), 1.0)
        return start + (3 * s * s - 2 * s * s * s) * (goal - start)

    return reference


class QuadWaypointController:
    """LQR on the hover linearization tracking a smooth position ramp.

    Stands in for a pilot flying the quadcopter from ``(0, 0, 0)`` to
    ``(1, 2, 3)``.
    """

    def __init__(
        self,
        quad: Quadcopter,
        goal: typing.Sequence[float] = (1.0, 2.0, 3.0),
        duration: float = 15.0,
        dt: float = SAMPLE_INTERVAL,
    ) -> None:
        self.quad = quad
        self.u_hover = np.array([quad.config.hover_thrust, 0.0, 0.0, 0.0])
        A, B = linearize(quad, np.zeros(12), self.u_hover)
        Ad, Bd = discretize(A, B, dt)
        Q = np.diag([4.0, 4.0, 4.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 0.1, 0.1, 0.1])
        R = np.diag([0.5, 50.0, 50.0, 50.0])
        self.K = lqr_gain(Ad, Bd, Q, R)
        self.reference = smooth_ramp(np.zeros(3), np.asarray(goal, dtype=float), duration)
        mg = quad.config.hover_thrust
        self.lower = np.array([0.0, -0.5, -0.5, -0.5])
        self.upper = np.array([3.0 * mg, 0.5, 0.5, 0.5])

    def __call__(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        target = np.zeros(12)
        target[:3] = self.reference(t)
        u = self.u_hover - self.K @ (x - target)
        return np.clip(u, self.lower, self.upper)


class CartpoleExcitation:
    """LQR around the upright position plus seeded Gaussian exploration noise."""

    def __init__(
        self,
        cartpole: Cartpole,
        noise: float = 1.0,
        seed: typing.Optional[int] = None,
        dt: float = SAMPLE_INTERVAL,
        force_limit: float = 10.0,
    ) -> None:
        frictionless = Cartpole(
            dataclasses.replace(cartpole.config, mu_c0=0.0, friction_rate=0.0, mu_p=0.0)
        )
        A, B = linearize(frictionless, np.zeros(4), np.zeros(1))
        Ad, Bd = discretize(A, B, dt)
        self.K = lqr_gain(Ad, Bd, np.diag([1.0, 0.1, 10.0, 0.1]), np.array([[0.1]]))
        self.noise = noise
        self.force_limit = force_limit
        self.rng = np.random.default_rng(seed)

    def __call__(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        u = -self.K @ x + self.noise * self.rng.standard_normal(1)
        return np.clip(u, -self.force_limit, self.force_limit)
