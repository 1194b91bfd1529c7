import numpy as np
import pytest

from dktv.baselines import (
    SingleDnnModel,
    TvdmdTracker,
    single_dnn_predict,
    single_dnn_train,
    tvdmd_fit,
    tvdmd_predict,
)
from dktv.core import DataBatch, TrainConfig, initialize, partition_stream, step
from dktv.observable import identity_net
from dktv.regression import fit_batch

A_TRUE = np.array([[0.9, 0.2], [-0.1, 0.8]])
B_TRUE = np.array([[0.0], [1.0]])


def linear_batches(N: int = 31, beta: int = 10, seed: int = 0) -> list[DataBatch]:
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((1, N))
    X = np.zeros((2, N))
    X[:, 0] = [1.0, -1.0]
    for k in range(N - 1):
        X[:, k + 1] = A_TRUE @ X[:, k] + B_TRUE @ U[:, k] + 0.05 * rng.standard_normal(2)
    return partition_stream(X, U, beta)


class TestTvdmd:
    def test_recovers_linear_system(self) -> None:
        rng = np.random.default_rng(1)
        X = rng.standard_normal((2, 8))
        U = rng.standard_normal((1, 8))
        batch = DataBatch(0, 0, X, A_TRUE @ X + B_TRUE @ U, U)
        model = tvdmd_fit(batch)
        np.testing.assert_allclose(model.A_lin, A_TRUE, atol=1e-10)
        np.testing.assert_allclose(model.B_lin, B_TRUE, atol=1e-10)
        assert model.window == 8
        np.testing.assert_allclose(
            tvdmd_predict(model, X[:, 0], U[:, 0]), A_TRUE @ X[:, 0] + B_TRUE @ U[:, 0]
        )

    def test_equals_identity_lift_without_training(self) -> None:
        batches = linear_batches()
        config = TrainConfig(epochs=0)
        snapshot, _ = initialize(batches[0], identity_net(2), config)
        model = tvdmd_fit(batches[0])
        np.testing.assert_allclose(model.A_lin, snapshot.matrices.A, atol=1e-10)
        np.testing.assert_allclose(model.B_lin, snapshot.matrices.B, atol=1e-10)

    def test_tracker_fits_newest_batch(self) -> None:
        batches = linear_batches()
        tracker = TvdmdTracker()
        assert tracker.current is None
        for batch in batches:
            tracker.update(batch)
        assert len(tracker.models) == 3
        np.testing.assert_array_equal(tracker.current.A_lin, tvdmd_fit(batches[-1]).A_lin)  # type: ignore[union-attr]

    def test_accumulating_tracker_fits_all_batches(self) -> None:
        batches = linear_batches()
        tracker = TvdmdTracker(accumulate=True)
        for batch in batches:
            tracker.update(batch)
        expected = fit_batch(
            np.hstack([b.X for b in batches]),
            np.hstack([b.X_bar for b in batches]),
            np.hstack([b.U for b in batches]),
            np.hstack([b.X for b in batches]),
        )
        np.testing.assert_allclose(tracker.current.A_lin, expected.A, atol=1e-9)  # type: ignore[union-attr]
        assert tracker.current.window == 30  # type: ignore[union-attr]

    def test_accumulating_tracker_matches_identity_dktv(self) -> None:
        batches = linear_batches()
        config = TrainConfig(epochs=0)
        snapshot, cache = initialize(batches[0], identity_net(2), config)
        for batch in batches[1:]:
            snapshot, cache = step(snapshot, cache, batch, config)
        tracker = TvdmdTracker(accumulate=True)
        for batch in batches:
            tracker.update(batch)
        np.testing.assert_allclose(tracker.current.A_lin, snapshot.matrices.A, atol=1e-9)  # type: ignore[union-attr]


class TestSingleDnn:
    def test_architecture(self) -> None:
        model = SingleDnnModel.build(3, 2, hidden=(16, 8), seed=0)
        assert model.net.input_dim == 5
        assert model.net.output_dim == 3
        assert model.net.layers[-1].activation == "identity"
        assert model.nu.shape == (16 * 6 + 8 * 17 + 3 * 9,)
        assert single_dnn_predict(model, np.zeros(3), np.zeros(2)).shape == (3,)

    def test_seeded(self) -> None:
        assert SingleDnnModel.build(2, 1, seed=4) == SingleDnnModel.build(2, 1, seed=4)

    def test_first_loss_is_mean_squared_error(self) -> None:
        (batch, *_) = linear_batches()
        model = SingleDnnModel.build(2, 1, hidden=(8,), seed=0)
        result = single_dnn_train(model, batch, TrainConfig(epochs=1))
        expected = np.mean(
            [
                np.sum((single_dnn_predict(model, batch.X[:, k], batch.U[:, k]) - batch.X_bar[:, k]) ** 2)
                for k in range(batch.beta)
            ]
        )
        assert result.losses[0] == pytest.approx(expected, rel=1e-12)
        assert not np.array_equal(result.model.nu, model.nu)

    def test_training_reduces_loss(self) -> None:
        (batch, *_) = linear_batches()
        model = SingleDnnModel.build(2, 1, hidden=(16,), seed=0)
        result = single_dnn_train(model, batch, TrainConfig(epochs=100, learning_rate=1e-2))
        assert len(result.losses) == 100
        assert result.losses[-1] < result.losses[0]
        assert not result.diverged

    def test_non_finite_loss_keeps_weights(self) -> None:
        (batch, *_) = linear_batches()
        X_bar = batch.X_bar.copy()
        X_bar[0, 0] = np.nan
        broken = DataBatch(0, 0, batch.X, X_bar, batch.U)
        model = SingleDnnModel.build(2, 1, hidden=(8,), seed=0)
        result = single_dnn_train(model, broken, TrainConfig(epochs=5))
        assert result.diverged
        assert result.losses == ()
        np.testing.assert_array_equal(result.model.nu, model.nu)
