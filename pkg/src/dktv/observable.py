"""The learned observable ``g(·, θ): ℝⁿ → ℝʳ``.

A small fully connected network with exact backpropagation, the loss that
couples it to the lifted linear model, an Adam optimizer with decoupled
weight decay and a sampled Lipschitz estimate.

Parameters live in one flat vector ``θ``. For every layer the weight
matrix (``output_dim × input_dim``, row-major) is followed by the bias.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing
from collections.abc import Sequence

import numpy as np
import scipy.spatial.distance

from dktv import DimensionError, DivergenceError, PreconditionError
from dktv.regression import KoopmanMatrices, RecursiveCache

log: logging.Logger = logging.getLogger(__name__)

Activation = typing.Literal["relu", "gaussian", "identity"]
"""``relu`` is ``max(0, z)``, ``gaussian`` is ``exp(−z²)``, ``identity`` is ``z``."""

ACTIVATIONS: tuple[str, ...] = typing.get_args(Activation)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gaussian":
        return np.exp(-z * z)
    return z


def _derivative(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient 0 at z = 0
        return (z > 0.0).astype(float)
    if name == "gaussian":
        return -2.0 * z * a
    return np.ones_like(z)


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: Activation = "relu"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionError(
                f"layer dimensions must be positive, got {self.input_dim}→{self.output_dim}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )

    @property
    def n_params(self) -> int:
        return self.output_dim * (self.input_dim + 1)

    def to_dict(self) -> dict[str, typing.Any]:
        return dataclasses.asdict(self)


class _Tape(typing.NamedTuple):
    """Pre-activations and activations recorded by a forward pass."""

    inputs: list[np.ndarray]
    preactivations: list[np.ndarray]
    outputs: list[np.ndarray]


class ObservableNet:
    """Feedforward network serving as the Koopman observable.

    A network is a value: training produces new instances through
    :meth:`with_theta` and a finished network may be shared read-only
    across threads.

    :param layers: Layer specifications, consecutive dimensions must chain.
    :param theta: Flat parameter vector of length :attr:`n_params`.
    """

    layers: tuple[LayerSpec, ...]

    theta: np.ndarray

    def __init__(self, layers: Sequence[LayerSpec], theta: np.ndarray) -> None:
        if len(layers) == 0:
            raise DimensionError("a network needs at least one layer")
        for previous, following in zip(layers[:-1], layers[1:]):
            if previous.output_dim != following.input_dim:
                raise DimensionError(
                    f"layer dimensions do not chain: {previous.output_dim} → "
                    f"{following.input_dim}"
                )
        self.layers = tuple(layers)
        theta = np.array(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise DimensionError(
                f"θ has {theta.size} entries, the layers need {self.n_params}"
            )
        theta.setflags(write=False)
        self.theta = theta

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden: Sequence[int],
        output_dim: int,
        hidden_activation: Activation = "relu",
        output_activation: Activation = "relu",
        seed: typing.Optional[int] = None,
    ) -> ObservableNet:
        """Randomly initialized network ``input_dim → hidden… → output_dim``.

        Weights and biases are drawn uniformly from ``±1/√fan_in``.
        """
        widths = [input_dim, *hidden, output_dim]
        layers = [
            LayerSpec(
                widths[i],
                widths[i + 1],
                hidden_activation if i < len(widths) - 2 else output_activation,
            )
            for i in range(len(widths) - 1)
        ]
        return cls(layers, init_params(layers, np.random.default_rng(seed)))

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def with_theta(self, theta: np.ndarray) -> ObservableNet:
        return ObservableNet(self.layers, theta)

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views into :attr:`theta`."""
        params = []
        offset = 0
        for layer in self.layers:
            size = layer.output_dim * layer.input_dim
            W = self.theta[offset : offset + size].reshape(
                layer.output_dim, layer.input_dim
            )
            offset += size
            b = self.theta[offset : offset + layer.output_dim]
            offset += layer.output_dim
            params.append((W, b))
        return params

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != self.input_dim:
            raise DimensionError(
                f"expected states with {self.input_dim} rows, got shape {X.shape}"
            )
        return X

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Lift one state ``x ∈ ℝⁿ`` to ``g(x, θ) ∈ ℝʳ``."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise DimensionError(
                f"expected a state of length {self.input_dim}, got shape {x.shape}"
            )
        return self.forward_batch(x[:, np.newaxis])[:, 0]

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        """Lift the columns of an ``n×N`` matrix, returning ``r×N``."""
        return self._record(X).outputs[-1]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward_batch(X)

    def _record(self, X: np.ndarray) -> _Tape:
        X = self._check_input(X)
        tape = _Tape([], [], [])
        a = X
        for layer, (W, b) in zip(self.layers, self.unpack()):
            tape.inputs.append(a)
            z = W @ a + b[:, np.newaxis]
            a = _activate(layer.activation, z)
            tape.preactivations.append(z)
            tape.outputs.append(a)
        return tape

    def _backward(self, tape: _Tape, d_out: np.ndarray) -> np.ndarray:
        grads: list[np.ndarray] = []
        params = self.unpack()
        delta = d_out
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            W, _ = params[index]
            dz = delta * _derivative(
                layer.activation, tape.preactivations[index], tape.outputs[index]
            )
            grads.append(dz.sum(axis=1))
            grads.append((dz @ tape.inputs[index].T).ravel())
            delta = W.T @ dz
        grads.reverse()
        return np.concatenate(grads)

    def vjp(self, X: np.ndarray, d_out: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. ``θ`` of ``Σ d_out ⊙ g(X, θ)``.

        :param X: ``n×N`` states.
        :param d_out: ``r×N`` derivative of a scalar w.r.t. the lifted states.
        """
        tape = self._record(X)
        d_out = np.asarray(d_out, dtype=float)
        if d_out.shape != tape.outputs[-1].shape:
            raise DimensionError(
                f"output gradient must have shape {tape.outputs[-1].shape}, got {d_out.shape}"
            )
        return self._backward(tape, d_out)

    def to_dict(self) -> dict[str, typing.Any]:
        return {"layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, data: dict[str, typing.Any], theta: np.ndarray) -> ObservableNet:
        return cls([LayerSpec(**layer) for layer in data["layers"]], theta)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObservableNet):
            return NotImplemented
        return self.layers == other.layers and np.array_equal(self.theta, other.theta)

    def __repr__(self) -> str:
        widths = [self.input_dim] + [layer.output_dim for layer in self.layers]
        return f"ObservableNet({'→'.join(map(str, widths))}, q={self.n_params})"


def identity_net(n: int) -> ObservableNet:
    """The lift ``g(x) = x``, a single identity layer with ``W = I`` and ``b = 0``."""
    layer = LayerSpec(n, n, "identity")
    return ObservableNet([layer], np.concatenate([np.eye(n).ravel(), np.zeros(n)]))


@dataclasses.dataclass(frozen=True)
class NetSpec:
    """Architecture of an observable, independent of the state dimension."""

    hidden: tuple[int, ...] = (32,)
    output_dim: int = 6
    """The lifted dimension ``r``."""

    hidden_activation: Activation = "relu"
    output_activation: Activation = "relu"

    def build(self, input_dim: int, seed: typing.Optional[int] = None) -> ObservableNet:
        return ObservableNet.build(
            input_dim,
            self.hidden,
            self.output_dim,
            hidden_activation=self.hidden_activation,
            output_activation=self.output_activation,
            seed=seed,
        )


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> np.ndarray:
    """Uniform ``±1/√fan_in`` initialization in the flat layout of :class:`ObservableNet`."""
    chunks = []
    for layer in layers:
        bound = 1.0 / np.sqrt(layer.input_dim)
        chunks.append(rng.uniform(-bound, bound, layer.output_dim * layer.input_dim))
        chunks.append(rng.uniform(-bound, bound, layer.output_dim))
    return np.concatenate(chunks)


class Transitions(typing.Protocol):
    """Aligned snapshot triplets ``(x_k, x_{k+1}, u_k)`` stored column-wise."""

    @property
    def X(self) -> np.ndarray: ...

    @property
    def X_bar(self) -> np.ndarray: ...

    @property
    def U(self) -> np.ndarray: ...


class LossTerms(typing.NamedTuple):
    """One evaluation of the training objective."""

    total: float
    L1: float
    """Mean squared lifted residual ``‖Ḡ − AG − BU‖²_F / β``."""

    L2: float
    """Mean squared reconstruction residual ``‖X − CG‖²_F / β``."""

    penalty: float
    """``λ_A · max(0, ‖A‖_F − 1)²``."""


def norm_penalty(A: np.ndarray, lambda_A: float) -> float:
    excess = max(0.0, float(np.linalg.norm(A, "fro")) - 1.0)
    return lambda_A * excess * excess


def objective(
    net: ObservableNet,
    batch: Transitions,
    matrices: KoopmanMatrices,
    w: float = 0.5,
    lambda_A: float = 0.0,
) -> tuple[LossTerms, np.ndarray]:
    """Loss and its exact ``θ``-gradient with ``A``, ``B`` and ``C`` held constant.

    The loss is ``2·(w·L1 + (1−w)·L2) + λ_A·max(0, ‖A‖_F − 1)²``, so the
    default ``w = 0.5`` weighs the lifted and the reconstruction residual
    equally, the stacked least-squares objective ``L1 + L2``.

    :raises DivergenceError: If the loss or its gradient is not finite.
    """
    if not 0.0 <= w <= 1.0:
        raise PreconditionError(f"loss weight w must lie in [0, 1], got {w}")
    X = np.asarray(batch.X, dtype=float)
    X_bar = np.asarray(batch.X_bar, dtype=float)
    U = np.asarray(batch.U, dtype=float).reshape(matrices.m, X.shape[1])
    beta = X.shape[1]
    penalty = norm_penalty(matrices.A, lambda_A)
    if beta == 0:
        return LossTerms(penalty, 0.0, 0.0, penalty), np.zeros(net.n_params)

    tape = net._record(np.hstack([X, X_bar]))
    lifted = tape.outputs[-1]
    G = lifted[:, :beta]
    G_bar = lifted[:, beta:]
    R1 = G_bar - matrices.A @ G - matrices.B @ U
    R2 = X - matrices.C @ G
    L1 = float(np.sum(R1 * R1)) / beta
    L2 = float(np.sum(R2 * R2)) / beta
    total = 2.0 * (w * L1 + (1.0 - w) * L2) + penalty

    c1 = 2.0 * w / beta
    c2 = 2.0 * (1.0 - w) / beta
    d_G = -2.0 * c1 * (matrices.A.T @ R1) - 2.0 * c2 * (matrices.C.T @ R2)
    d_G_bar = 2.0 * c1 * R1
    grad = net._backward(tape, np.hstack([d_G, d_G_bar]))
    if not (math.isfinite(total) and np.all(np.isfinite(grad))):
        raise DivergenceError(f"non-finite training loss {total}")
    return LossTerms(total, L1, L2, penalty), grad


def loss_gradient(
    net: ObservableNet,
    batch: Transitions,
    matrices: KoopmanMatrices,
    w: float = 0.5,
    lambda_A: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Training loss on one batch and its gradient w.r.t. ``θ``.

    See :func:`objective` for the loss. The norm penalty does not depend
    on ``θ`` while the matrices are held constant, its derivative through
    the refit is :func:`norm_penalty_gradient`.
    """
    terms, grad = objective(net, batch, matrices, w=w, lambda_A=lambda_A)
    return terms.total, grad


def norm_penalty_gradient(
    net: ObservableNet,
    batch: Transitions,
    cache: RecursiveCache,
    matrices: KoopmanMatrices,
    lambda_A: float,
) -> np.ndarray:
    """``θ``-gradient of ``λ_A·max(0, ‖A‖_F − 1)²`` through the cached refit.

    ``[A, B] = V·Γ⁻¹`` where ``V`` and ``Γ`` contain the moments of the
    current batch lifted with ``θ``. With ``W = S·Γ⁻¹``, ``S`` the
    derivative of the penalty w.r.t. ``[A, B]`` and ``Z = [A, B]ᵀW``::

        ∂/∂Ḡ = W χ          ∂/∂χ = WᵀḠ − (Z + Zᵀ) χ

    :param cache: The cache after absorbing ``batch`` lifted with ``net``.
    :param matrices: The solution belonging to ``cache``.
    """
    norm = float(np.linalg.norm(matrices.A, "fro"))
    if lambda_A == 0.0 or norm <= 1.0 or cache.G_ab_inv is None:
        return np.zeros(net.n_params)
    X = np.asarray(batch.X, dtype=float)
    X_bar = np.asarray(batch.X_bar, dtype=float)
    U = np.asarray(batch.U, dtype=float).reshape(matrices.m, X.shape[1])
    beta = X.shape[1]
    r = matrices.r

    tape = net._record(np.hstack([X, X_bar]))
    G = tape.outputs[-1][:, :beta]
    G_bar = tape.outputs[-1][:, beta:]
    chi = np.vstack([G, U])

    S = np.zeros((r, r + matrices.m))
    S[:, :r] = 2.0 * lambda_A * (norm - 1.0) * matrices.A / norm
    W = S @ cache.G_ab_inv
    Z = matrices.AB.T @ W
    d_G_bar = W @ chi
    d_chi = W.T @ G_bar - (Z + Z.T) @ chi
    return net._backward(tape, np.hstack([d_chi[:r], d_G_bar]))


@dataclasses.dataclass(frozen=True)
class AdamState:
    """Optimizer state. :func:`adam_step` returns a new instance per update."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(
        cls, n_params: int, learning_rate: float = 1e-3, weight_decay: float = 1e-4
    ) -> AdamState:
        return cls(
            first_moment=np.zeros(n_params),
            second_moment=np.zeros(n_params),
            learning_rate=learning_rate,
            weight_decay=weight_decay,
        )


def adam_step(
    state: AdamState, theta: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, AdamState]:
    """One Adam update with decoupled weight decay.

    ``θ`` is first shrunk by ``1 − lr·weight_decay``, then moved by the
    bias-corrected moment ratio.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape or state.first_moment.shape != theta.shape:
        raise DimensionError(
            f"θ {theta.shape}, gradient {grad.shape} and moments "
            f"{state.first_moment.shape} must have the same shape"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    shrunk = theta * (1.0 - state.learning_rate * state.weight_decay)
    updated = shrunk - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated, dataclasses.replace(
        state, first_moment=m, second_moment=v, step_count=t
    )


def estimate_lipschitz(
    net: ObservableNet,
    samples: np.ndarray,
    max_pairs: typing.Optional[int] = None,
    seed: typing.Optional[int] = None,
) -> float:
    """Sampled lower estimate of the Lipschitz constant ``μ_g`` of ``g(·, θ)``.

    Returns ``max ‖g(x) − g(y)‖ / ‖x − y‖`` over all pairs of distinct
    columns of ``samples``, or over ``max_pairs`` randomly drawn pairs.

    :param samples: ``n×N`` states.

    :raises PreconditionError: If fewer than two distinct states are given.
    """
    X = net._check_input(samples)
    N = X.shape[1]
    if N < 2:
        raise PreconditionError("the Lipschitz estimate needs at least two samples")
    G = net.forward_batch(X)
    total_pairs = N * (N - 1) // 2
    if max_pairs is None or max_pairs >= total_pairs:
        dx = scipy.spatial.distance.pdist(X.T)
        dg = scipy.spatial.distance.pdist(G.T)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, N, size=max_pairs)
        j = rng.integers(0, N, size=max_pairs)
        dx = np.linalg.norm(X[:, i] - X[:, j], axis=0)
        dg = np.linalg.norm(G[:, i] - G[:, j], axis=0)
    distinct = dx > 0.0
    if not np.any(distinct):
        raise PreconditionError("all samples are identical, μ_g is undefined")
    return float(np.max(dg[distinct] / dx[distinct]))
