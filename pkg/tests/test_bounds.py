import json
import logging

import numpy as np
import pytest

from dktv import PreconditionError
from dktv.bounds import (
    BatchHistory,
    BatchRecord,
    accumulation_matrix,
    bound_components,
    empirical_increments,
    matrix_norm,
    one_step_errors,
    report_for,
    residual_maxima,
    rollout_errors,
    validate,
)
from dktv.core import DataBatch, DkrSnapshot, TrainConfig, initialize, partition_stream, step
from dktv.observable import identity_net
from dktv.regression import KoopmanMatrices

A_TRUE = np.array([[0.9, 0.1, 0.0], [-0.1, 0.85, 0.05], [0.0, -0.05, 0.7]])
B_TRUE = np.array([[0.0], [0.5], [1.0]])


def scalar_record(tau: int, a: float, beta: int) -> BatchRecord:
    return BatchRecord(tau, np.array([[a]]), np.eye(1), beta)


def scalar_snapshot(a: float, b: float, c: float, tau: int = 0) -> DkrSnapshot:
    return DkrSnapshot(
        net=identity_net(1),
        matrices=KoopmanMatrices(np.array([[a]]), np.array([[b]]), np.array([[c]])),
        tau=tau,
    )


def linear_batches() -> list[DataBatch]:
    rng = np.random.default_rng(0)
    U = rng.standard_normal((1, 31))
    X = np.zeros((3, 31))
    X[:, 0] = rng.standard_normal(3)
    for k in range(30):
        X[:, k + 1] = A_TRUE @ X[:, k] + B_TRUE @ U[:, k]
    return partition_stream(X, U, 10)


class TestIncrements:
    def test_largest_consecutive_increments(self) -> None:
        batch = DataBatch(
            0, 0, np.array([[0.0, 1.0, 3.0]]), np.array([[1.0, 3.0, 4.0]]), np.array([[0.0, 0.5, -1.0]])
        )
        assert empirical_increments(batch) == pytest.approx((2.0, 1.5))

    def test_autonomous_batch_has_no_input_increment(self) -> None:
        batch = DataBatch(0, 0, np.array([[0.0, 2.0]]), np.array([[2.0, 3.0]]), np.zeros((0, 2)))
        assert empirical_increments(batch) == pytest.approx((2.0, 0.0))


class TestAccumulation:
    def test_first_batch_sums_powers_within(self) -> None:
        history = BatchHistory([scalar_record(0, 0.5, 4)])
        # 1 + 0.5 + 0.25
        assert accumulation_matrix(history, 4)[0, 0] == pytest.approx(1.75)

    def test_two_batches(self) -> None:
        history = BatchHistory([scalar_record(0, 0.5, 2), scalar_record(1, 0.4, 5)])
        # (1 + 0.4) + 0.4 * (0.5 + 0.25)
        assert accumulation_matrix(history, 3)[0, 0] == pytest.approx(1.7)

    def test_three_batches_carry_the_product(self) -> None:
        history = BatchHistory(
            [scalar_record(0, 0.5, 2), scalar_record(1, 0.4, 3), scalar_record(2, 0.2, 5)]
        )
        # 1 + (0.4 + 0.16 + 0.064) + 0.4**3 * (0.5 + 0.25)
        assert accumulation_matrix(history, 2)[0, 0] == pytest.approx(1.672)

    def test_single_step_has_no_accumulation(self) -> None:
        history = BatchHistory([scalar_record(0, 0.5, 2)])
        assert accumulation_matrix(history, 1)[0, 0] == 0.0

    def test_empty_history(self) -> None:
        with pytest.raises(PreconditionError):
            accumulation_matrix(BatchHistory(), 3)


class TestBatchHistory:
    def test_records_in_order(self) -> None:
        history = BatchHistory([scalar_record(0, 0.5, 2)])
        with pytest.raises(PreconditionError, match="expected the record of batch 1"):
            history.add(scalar_record(2, 0.5, 2))

    def test_upto(self) -> None:
        history = BatchHistory([scalar_record(t, 0.5, 2) for t in range(4)])
        assert len(history.upto(1)) == 2


class TestBoundComponents:
    def test_terms_by_hand(self) -> None:
        history = BatchHistory([scalar_record(0, 0.5, 4)])
        report = bound_components(
            history, scalar_snapshot(0.5, 1.0, 2.0), (0.1, 0.2), 3.0, (0.01, 0.02)
        )
        assert report.steps == 5
        assert report.L_a == pytest.approx(1.0 * 3.0 * 0.1 + 2.0 * 0.2)
        # ‖C‖·(1 + 0.5 + 0.25 + 0.125)·L1
        assert report.L_b == pytest.approx(2.0 * 1.875 * 0.01)
        assert report.L_c == pytest.approx(0.12)
        assert report.total_bound == pytest.approx(0.8575)
        assert report.asymptotic_bound == pytest.approx(0.82)
        assert report.assumption_breaches == ()

    def test_unstable_matrix_is_flagged(self) -> None:
        history = BatchHistory([scalar_record(0, 2.0, 4)])
        report = bound_components(
            history, scalar_snapshot(2.0, 0.0, 1.0), (0.1, 0.0), 1.0, (0.0, 0.0)
        )
        assert report.assumption_breaches == ("‖A_0‖=2 ≥ 1",)

    def test_frobenius_norm(self) -> None:
        assert matrix_norm(np.eye(4), "frobenius") == pytest.approx(2.0)
        assert matrix_norm(np.eye(4)) == pytest.approx(1.0)
        assert matrix_norm(np.zeros((3, 0))) == 0.0

    @pytest.mark.parametrize("L1", [0.0, 0.01, 0.1])
    def test_accumulated_term_grows_with_the_lifted_residual(self, L1: float) -> None:
        history = BatchHistory([scalar_record(0, 0.5, 4), scalar_record(1, 0.6, 4)])
        snapshot = scalar_snapshot(0.6, 1.0, 2.0, tau=1)
        smaller = bound_components(history, snapshot, (0.1, 0.2), 3.0, (L1, 0.0))
        larger = bound_components(history, snapshot, (0.1, 0.2), 3.0, (L1 + 0.05, 0.0))
        assert larger.L_b > smaller.L_b
        assert larger.L_a == smaller.L_a

    def test_accumulated_term_grows_with_the_state_matrices(self) -> None:
        pattern = np.array([[0.5, 0.3], [0.2, 0.6]])
        C = np.array([[1.0, 0.5], [0.0, 1.0]])
        L_b = []
        for scale in np.linspace(0.1, 1.1, 11):
            A = scale * pattern
            history = BatchHistory(
                [BatchRecord(0, A, C, 5), BatchRecord(1, A, C, 5), BatchRecord(2, A, C, 5)]
            )
            snapshot = DkrSnapshot(
                net=identity_net(2),
                matrices=KoopmanMatrices(A, np.zeros((2, 0)), C),
                tau=2,
            )
            L_b.append(bound_components(history, snapshot, (0.1, 0.0), 1.0, (0.01, 0.0)).L_b)
        assert all(b > a for a, b in zip(L_b, L_b[1:]))


class TestValidate:
    def setup_method(self) -> None:
        self.report = bound_components(
            BatchHistory([scalar_record(0, 0.5, 4)]),
            scalar_snapshot(0.5, 1.0, 2.0),
            (0.1, 0.2),
            3.0,
            (0.01, 0.02),
        )

    def test_errors_below_bound(self) -> None:
        report = validate([0.1, 0.5], self.report, [11, 12])
        assert not report.violated
        assert report.max_observed == 0.5

    def test_violation_is_logged(self, caplog: pytest.LogCaptureFixture) -> None:
        with caplog.at_level(logging.WARNING, logger="dktv.bounds"):
            report = validate([0.1, 1.0, 0.9], self.report, [11, 12, 13])
        assert report.violated
        assert report.violation_indices == (12, 13)
        assert "exceed the bound" in caplog.text

    def test_indices_must_match(self) -> None:
        with pytest.raises(PreconditionError):
            validate([0.1, 0.2], self.report, [3])

    def test_report_serializes(self) -> None:
        data = json.loads(json.dumps(validate([0.1], self.report).to_dict()))
        assert data["observed_indices"] == [0]
        assert data["norm"] == "spectral"


class TestExactModel:
    def setup_method(self) -> None:
        self.batches = linear_batches()
        config = TrainConfig(epochs=0)
        first, cache = initialize(self.batches[0], identity_net(3), config)
        second, _ = step(first, cache, self.batches[1], config)
        self.snapshots = [first, second]

    def test_residuals_vanish(self) -> None:
        L1, L2 = residual_maxima(self.batches[1], self.snapshots[0])
        assert L1 < 1e-8
        assert L2 < 1e-8

    def test_one_step_errors_carry_global_indices(self) -> None:
        indices, errors = one_step_errors(self.snapshots[0], self.batches[1])
        assert indices.tolist() == list(range(11, 21))
        assert np.max(errors) < 1e-8

    def test_rollout_errors(self) -> None:
        indices, errors = rollout_errors(self.snapshots[0], self.batches[1])
        assert indices[0] == 11
        assert np.max(errors) < 1e-6

    def test_report_holds(self) -> None:
        history = BatchHistory.from_snapshots(self.snapshots)
        report = report_for(self.batches[1], self.snapshots[0], history)
        assert report.tau == 0
        assert report.mu_g == pytest.approx(1.0)
        assert not report.violated
        assert len(report.observed_errors) == 10
        assert report.total_bound >= report.mu_x
