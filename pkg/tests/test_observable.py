import numpy as np
import pytest

from dktv import DimensionError, DivergenceError, PreconditionError
from dktv.core import DataBatch
from dktv.observable import (
    AdamState,
    LayerSpec,
    NetSpec,
    ObservableNet,
    adam_step,
    estimate_lipschitz,
    identity_net,
    loss_gradient,
    norm_penalty,
    norm_penalty_gradient,
    objective,
)
from dktv.regression import KoopmanMatrices, RecursiveCache
from dktv.testing import central_difference


def hand_set_net() -> ObservableNet:
    layers = [LayerSpec(2, 2, "relu"), LayerSpec(2, 1, "identity")]
    W1 = [[1.0, 2.0], [-1.0, 1.0]]
    b1 = [0.0, 0.5]
    W2 = [[1.0, -1.0]]
    b2 = [0.25]
    return ObservableNet(layers, np.concatenate([np.ravel(W1), b1, np.ravel(W2), b2]))


def linear_net(W: np.ndarray, b: np.ndarray) -> ObservableNet:
    layer = LayerSpec(W.shape[1], W.shape[0], "identity")
    return ObservableNet([layer], np.concatenate([W.ravel(), b]))


def random_batch(rng: np.random.Generator, n: int, m: int, beta: int) -> DataBatch:
    return DataBatch(
        tau=0,
        k_start=0,
        X=rng.standard_normal((n, beta)),
        X_bar=rng.standard_normal((n, beta)),
        U=rng.standard_normal((m, beta)),
    )


class TestForward:
    def test_hand_set_relu_net(self) -> None:
        # z = [1, -0.5], relu -> [1, 0], output 1 - 0 + 0.25
        assert hand_set_net().forward(np.array([1.0, 0.0])) == pytest.approx([1.25])

    def test_batch_matches_columns(self) -> None:
        rng = np.random.default_rng(3)
        net = ObservableNet.build(3, (8, 8), 5, hidden_activation="gaussian", seed=1)
        X = rng.standard_normal((3, 5))
        batch = net.forward_batch(X)
        for i in range(5):
            np.testing.assert_allclose(batch[:, i], net.forward(X[:, i]), rtol=0, atol=1e-15)

    def test_identity_net(self) -> None:
        x = np.array([0.3, -2.0, 7.5])
        np.testing.assert_array_equal(identity_net(3).forward(x), x)

    def test_wrong_state_length(self) -> None:
        with pytest.raises(DimensionError):
            hand_set_net().forward(np.zeros(3))

    def test_wrong_theta_length(self) -> None:
        with pytest.raises(DimensionError, match="θ has 3 entries"):
            ObservableNet([LayerSpec(2, 2)], np.zeros(3))

    def test_layers_must_chain(self) -> None:
        with pytest.raises(DimensionError, match="do not chain"):
            ObservableNet([LayerSpec(2, 3), LayerSpec(4, 1)], np.zeros(9 + 5))

    def test_theta_is_read_only(self) -> None:
        net = hand_set_net()
        with pytest.raises(ValueError):
            net.theta[0] = 1.0

    def test_unknown_activation(self) -> None:
        with pytest.raises(ValueError, match="unknown activation"):
            LayerSpec(2, 2, "tanh")  # type: ignore[arg-type]

    def test_spec_builds_requested_widths(self) -> None:
        net = NetSpec(hidden=(16,), output_dim=6).build(4, seed=0)
        assert net.input_dim == 4
        assert net.output_dim == 6
        assert net.n_params == 16 * 5 + 6 * 17

    def test_same_seed_same_parameters(self) -> None:
        assert NetSpec().build(2, seed=7) == NetSpec().build(2, seed=7)
        assert NetSpec().build(2, seed=7) != NetSpec().build(2, seed=8)

    def test_dict_round_trip_keeps_architecture(self) -> None:
        net = NetSpec(hidden_activation="gaussian").build(3, seed=0)
        assert ObservableNet.from_dict(net.to_dict(), net.theta) == net


class TestObjective:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        m = int(rng.integers(0, 3))
        r = int(rng.integers(2, 6))
        hidden = tuple(int(h) for h in rng.integers(3, 8, size=rng.integers(1, 3)))
        net = ObservableNet.build(
            n,
            hidden,
            r,
            hidden_activation="gaussian",
            output_activation=["gaussian", "identity"][seed % 2],
            seed=seed,
        )
        batch = random_batch(rng, n, m, beta=r + m + 4)
        matrices = KoopmanMatrices(
            rng.standard_normal((r, r)) * 0.5,
            rng.standard_normal((r, m)),
            rng.standard_normal((n, r)),
        )
        w = float(rng.uniform(0.0, 1.0))

        def loss(theta: np.ndarray) -> float:
            return loss_gradient(net.with_theta(theta), batch, matrices, w=w)[0]

        _, grad = loss_gradient(net, batch, matrices, w=w)
        numeric = central_difference(loss, net.theta)
        assert np.linalg.norm(grad - numeric) <= 1e-6 * np.linalg.norm(numeric)

    @pytest.mark.parametrize("seed", range(10))
    def test_relu_gradient_matches_finite_differences(self, seed: int) -> None:
        rng = np.random.default_rng(100 + seed)
        net = ObservableNet.build(2, (6,), 4, hidden_activation="relu", output_activation="identity", seed=seed)
        batch = random_batch(rng, 2, 1, beta=9)
        matrices = KoopmanMatrices(
            rng.standard_normal((4, 4)) * 0.5,
            rng.standard_normal((4, 1)),
            rng.standard_normal((2, 4)),
        )

        def loss(theta: np.ndarray) -> float:
            return loss_gradient(net.with_theta(theta), batch, matrices)[0]

        _, grad = loss_gradient(net, batch, matrices)
        numeric = central_difference(loss, net.theta)
        assert np.linalg.norm(grad - numeric) <= 1e-6 * np.linalg.norm(numeric)

    def test_invariant_under_column_permutation(self) -> None:
        rng = np.random.default_rng(7)
        net = ObservableNet.build(3, (5,), 4, hidden_activation="gaussian", seed=7)
        batch = random_batch(rng, 3, 2, 12)
        order = rng.permutation(12)
        shuffled = DataBatch(0, 0, batch.X[:, order], batch.X_bar[:, order], batch.U[:, order])
        matrices = KoopmanMatrices(
            rng.standard_normal((4, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 4))
        )
        terms, grad = objective(net, batch, matrices, w=0.3, lambda_A=2.0)
        shuffled_terms, shuffled_grad = objective(net, shuffled, matrices, w=0.3, lambda_A=2.0)
        np.testing.assert_allclose(shuffled_terms, terms, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(shuffled_grad, grad, rtol=1e-10, atol=1e-12)

    def test_non_finite_data_raises_divergence(self) -> None:
        X = np.array([[1.0, np.nan, 0.5], [0.0, 1.0, 2.0]])
        batch = DataBatch(0, 0, X, np.ones((2, 3)), np.zeros((0, 3)))
        with pytest.raises(DivergenceError, match="non-finite"):
            objective(identity_net(2), batch, KoopmanMatrices(np.eye(2), np.zeros((2, 0)), np.eye(2)))

    def test_equal_weights_give_stacked_objective(self) -> None:
        rng = np.random.default_rng(0)
        net = ObservableNet.build(2, (4,), 3, seed=0)
        batch = random_batch(rng, 2, 1, 8)
        matrices = KoopmanMatrices(np.eye(3), np.ones((3, 1)), np.ones((2, 3)))
        terms, _ = objective(net, batch, matrices, w=0.5)
        assert terms.total == pytest.approx(terms.L1 + terms.L2)
        assert terms.penalty == 0.0

    def test_residual_terms_are_means(self) -> None:
        net = identity_net(1)
        batch = DataBatch(0, 0, np.array([[1.0, 2.0]]), np.array([[2.0, 4.0]]), np.zeros((0, 2)))
        matrices = KoopmanMatrices(np.eye(1), np.zeros((1, 0)), np.eye(1))
        terms, _ = objective(net, batch, matrices)
        # lifted residuals 1 and 2, reconstruction exact
        assert terms.L1 == pytest.approx(2.5)
        assert terms.L2 == 0.0

    def test_penalty_only_above_unit_norm(self) -> None:
        assert norm_penalty(np.eye(1) * 0.5, 10.0) == 0.0
        assert norm_penalty(np.eye(1) * 3.0, 10.0) == pytest.approx(40.0)

    def test_weight_out_of_range(self) -> None:
        rng = np.random.default_rng(0)
        net = identity_net(2)
        batch = random_batch(rng, 2, 0, 4)
        with pytest.raises(PreconditionError, match="w must lie in"):
            objective(net, batch, KoopmanMatrices.zeros(2, 2, 0), w=1.5)


class TestNormPenaltyGradient:
    def setup_method(self) -> None:
        rng = np.random.default_rng(11)
        X = rng.standard_normal((3, 12))
        # x⁺ = 2x, so the exact lifted A has eigenvalues 2, 2, 2, 1
        self.batch = DataBatch(0, 0, X, 2.0 * X, np.zeros((0, 12)))
        self.net = linear_net(rng.standard_normal((4, 3)), rng.standard_normal(4))

    def penalty(self, theta: np.ndarray, lambda_A: float) -> float:
        net = self.net.with_theta(theta)
        cache = RecursiveCache.seed(
            net(self.batch.X), net(self.batch.X_bar), None, self.batch.X
        )
        return norm_penalty(cache.matrices().A, lambda_A)

    def test_matches_finite_differences_through_refit(self) -> None:
        net = self.net
        cache = RecursiveCache.seed(net(self.batch.X), net(self.batch.X_bar), None, self.batch.X)
        matrices = cache.matrices()
        assert np.linalg.norm(matrices.A, "fro") > 1.0
        grad = norm_penalty_gradient(net, self.batch, cache, matrices, 0.3)
        numeric = central_difference(lambda t: self.penalty(t, 0.3), net.theta)
        assert np.linalg.norm(grad - numeric) <= 1e-5 * np.linalg.norm(numeric)

    def test_vanishes_without_weight(self) -> None:
        net = self.net
        cache = RecursiveCache.seed(net(self.batch.X), net(self.batch.X_bar), None, self.batch.X)
        grad = norm_penalty_gradient(net, self.batch, cache, cache.matrices(), 0.0)
        np.testing.assert_array_equal(grad, np.zeros(net.n_params))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self) -> None:
        state = AdamState.zeros(3, learning_rate=0.01, weight_decay=0.0)
        theta, state = adam_step(state, np.zeros(3), np.array([2.0, -0.5, 1e3]))
        np.testing.assert_allclose(theta, [-0.01, 0.01, -0.01], rtol=1e-6)
        assert state.step_count == 1

    def test_decoupled_weight_decay(self) -> None:
        state = AdamState.zeros(2, learning_rate=0.1, weight_decay=0.5)
        theta, _ = adam_step(state, np.array([1.0, -2.0]), np.zeros(2))
        np.testing.assert_allclose(theta, [0.95, -1.9])

    def test_shape_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))


class TestLipschitz:
    def test_scaled_identity(self) -> None:
        net = linear_net(3.0 * np.eye(2), np.zeros(2))
        samples = np.random.default_rng(0).standard_normal((2, 20))
        assert estimate_lipschitz(net, samples) == pytest.approx(3.0)

    def test_sampled_pairs_bound_from_below(self) -> None:
        net = ObservableNet.build(2, (16,), 4, seed=2)
        samples = np.random.default_rng(1).standard_normal((2, 60))
        exhaustive = estimate_lipschitz(net, samples)
        sampled = estimate_lipschitz(net, samples, max_pairs=200, seed=0)
        assert sampled <= exhaustive + 1e-12

    def test_needs_two_samples(self) -> None:
        with pytest.raises(PreconditionError):
            estimate_lipschitz(identity_net(2), np.zeros((2, 1)))

    def test_identical_samples(self) -> None:
        with pytest.raises(PreconditionError, match="identical"):
            estimate_lipschitz(identity_net(2), np.ones((2, 4)))
