import numpy as np
import pytest

from dktv import PreconditionError
from dktv.core import DkrSnapshot, OnlineDktv, TrainConfig
from dktv.mpc import (
    MpcProblem,
    build_lifted_qp,
    explicit_cost,
    pretrain_learner,
    receding_horizon_run,
    solve_horizon,
)
from dktv.observable import ObservableNet, identity_net
from dktv.regression import KoopmanMatrices
from dktv.systems import Cartpole, cart_friction


def random_snapshot(seed: int, n: int = 2, m: int = 1, r: int = 4, beta: int = 20) -> DkrSnapshot:
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((r, r))
    A *= 0.95 / float(np.max(np.abs(np.linalg.eigvals(A))))
    return DkrSnapshot(
        net=ObservableNet.build(n, (6,), r, hidden_activation="gaussian", seed=seed),
        matrices=KoopmanMatrices(A, rng.standard_normal((r, m)), rng.standard_normal((n, r))),
        tau=0,
        beta=beta,
    )


def problem(horizon: int = 4, **kwargs: object) -> MpcProblem:
    return MpcProblem(Q=np.diag([1.0, 0.5]), R=np.array([[0.1]]), horizon=horizon, **kwargs)  # type: ignore[arg-type]


class TestCondensedCost:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_explicit_rollout(self, seed: int) -> None:
        snapshot = random_snapshot(seed)
        mpc = problem(goal=np.array([0.3, -0.2]), terminal_weight=3.0)
        x = np.array([0.5, 1.0])
        qp = build_lifted_qp(snapshot, x, mpc)
        U = np.random.default_rng(seed + 100).standard_normal(4)
        assert qp.objective(U) == pytest.approx(explicit_cost(snapshot, x, U, mpc), rel=1e-10)

    def test_explicit_terminal_weight(self) -> None:
        snapshot = random_snapshot(1)
        mpc = problem(Q_terminal=5.0 * np.eye(4))
        x = np.array([0.1, 0.2])
        qp = build_lifted_qp(snapshot, x, mpc)
        U = np.ones(4)
        assert qp.objective(U) == pytest.approx(explicit_cost(snapshot, x, U, mpc), rel=1e-10)

    def test_horizon_limited_by_batch_size(self) -> None:
        with pytest.raises(PreconditionError, match="exceeds the batch size"):
            build_lifted_qp(random_snapshot(0, beta=5), np.zeros(2), problem(horizon=10))

    def test_dimensions_must_match_model(self) -> None:
        mpc = MpcProblem(Q=np.eye(3), R=np.eye(1), horizon=2)
        with pytest.raises(PreconditionError, match="do not match the model"):
            build_lifted_qp(random_snapshot(0), np.zeros(2), mpc)


class TestProblem:
    def test_R_must_be_positive_definite(self) -> None:
        with pytest.raises(PreconditionError, match="R must be positive definite"):
            MpcProblem(Q=np.eye(2), R=np.zeros((1, 1)))

    def test_Q_must_be_positive_semidefinite(self) -> None:
        with pytest.raises(PreconditionError, match="Q must be positive semidefinite"):
            MpcProblem(Q=-np.eye(2), R=np.eye(1))

    def test_horizon_at_least_one(self) -> None:
        with pytest.raises(PreconditionError):
            MpcProblem(Q=np.eye(2), R=np.eye(1), horizon=0)

    def test_bound_length(self) -> None:
        snapshot = random_snapshot(0)
        mpc = problem(u_min=[-1.0, -1.0])
        with pytest.raises(PreconditionError, match="bound must have 1 entries"):
            solve_horizon(build_lifted_qp(snapshot, np.ones(2), mpc), mpc)


class TestSolveHorizon:
    def test_unconstrained_minimizer(self) -> None:
        snapshot = random_snapshot(2)
        mpc = problem()
        qp = build_lifted_qp(snapshot, np.array([1.0, -1.0]), mpc)
        solution = solve_horizon(qp, mpc)
        assert solution.converged
        assert solution.iterations == 0
        assert solution.U.shape == (1, 4)
        U = solution.U.T.ravel()
        np.testing.assert_allclose(qp.H @ U + qp.f, np.zeros(4), atol=1e-8)

    def test_no_state_weight_gives_zero_input(self) -> None:
        snapshot = random_snapshot(3)
        mpc = MpcProblem(Q=np.zeros((2, 2)), R=np.eye(1), horizon=1)
        solution = solve_horizon(build_lifted_qp(snapshot, np.array([2.0, 1.0]), mpc), mpc)
        np.testing.assert_allclose(solution.U, np.zeros((1, 1)), atol=1e-12)

    def test_single_step_matches_grid_search(self) -> None:
        snapshot = random_snapshot(4)
        mpc = problem(horizon=1, goal=np.array([3.0, 3.0]), u_min=-0.5, u_max=0.5)
        qp = build_lifted_qp(snapshot, np.array([-1.0, 0.5]), mpc)
        solution = solve_horizon(qp, mpc)
        grid = np.linspace(-0.5, 0.5, 2001)
        best = min(qp.objective(np.array([u])) for u in grid)
        assert solution.cost <= best + 1e-9
        assert -0.5 <= solution.U[0, 0] <= 0.5

    @pytest.mark.parametrize("seed", range(3))
    def test_beats_random_feasible_sequences(self, seed: int) -> None:
        snapshot = random_snapshot(seed)
        mpc = problem(horizon=3, goal=np.array([5.0, -5.0]), u_min=-0.2, u_max=0.2, max_iterations=2000)
        qp = build_lifted_qp(snapshot, np.array([0.2, 0.4]), mpc)
        solution = solve_horizon(qp, mpc)
        assert np.all(np.abs(solution.U) <= 0.2 + 1e-12)
        rng = np.random.default_rng(seed)
        for _ in range(200):
            U = rng.uniform(-0.2, 0.2, size=3)
            assert solution.cost <= qp.objective(U) + 1e-9

    def test_inside_box_matches_unconstrained(self) -> None:
        snapshot = random_snapshot(5)
        free = problem()
        boxed = problem(u_min=-1e6, u_max=1e6)
        x = np.array([0.3, 0.1])
        a = solve_horizon(build_lifted_qp(snapshot, x, free), free)
        b = solve_horizon(build_lifted_qp(snapshot, x, boxed), boxed)
        np.testing.assert_allclose(a.U, b.U)

    def test_soft_state_bounds_reduce_violation(self) -> None:
        snapshot = random_snapshot(6)
        x = np.array([1.0, 1.0])
        goal = np.array([2.0, 2.0])

        def violation(mpc: MpcProblem) -> float:
            qp = build_lifted_qp(snapshot, x, mpc)
            U = solve_horizon(qp, mpc).U.T.ravel()
            states = qp.C @ qp.predicted_lifted(U)
            return float(np.sum(np.maximum(states - 1.5, 0.0) ** 2))

        free = problem(goal=goal)
        bounded = problem(goal=goal, x_max=1.5, penalty_weight=10.0)
        assert violation(bounded) <= violation(free) + 1e-9


class TestClosedLoop:
    def test_needs_pretrained_model(self) -> None:
        learner = OnlineDktv(identity_net(4), 10, TrainConfig(epochs=0))
        mpc = MpcProblem(Q=np.eye(4), R=np.eye(1), horizon=5)
        with pytest.raises(PreconditionError, match="pre-trained"):
            receding_horizon_run(Cartpole(), learner, mpc, 1.0, np.zeros(4))

    def test_short_run_records_every_step(self) -> None:
        cartpole = Cartpole()
        learner = OnlineDktv(identity_net(4), 10, TrainConfig(epochs=0))
        x = pretrain_learner(learner, cartpole, 21, seed=0)
        assert len(learner.snapshots) == 2
        mpc = MpcProblem(
            Q=np.diag([1.0, 0.1, 10.0, 0.1]), R=np.array([[0.1]]), horizon=5, u_min=-10.0, u_max=10.0
        )
        result = receding_horizon_run(cartpole, learner, mpc, 1.0, x)
        K = result.times.size
        assert 1 <= K <= 10
        assert result.states.shape == (4, K)
        assert result.inputs.shape == (1, K)
        assert np.all(np.abs(result.inputs) <= 10.0 + 1e-12)
        np.testing.assert_allclose(result.mu_c, [cart_friction(t) for t in result.times])
        if not result.failed:
            assert K == 10
            assert result.model_updates == 1
        else:
            assert result.max_abs_theta > 0.0
