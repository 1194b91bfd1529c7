"""The experiments the command line runs, as harness :class:`~dktv.verdict.Experiment` objects.

Every experiment writes its CSV tables (and, with ``plots``, SVG figures)
into its output directory, records the run in ``manifest.json`` and
returns the metrics its assertions judge. Replicas over seeds or widths
run on worker threads when ``jobs > 1``; every replica owns its complete
pipeline and results are merged in submission order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import typing
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from dktv import ConfigError, DktvError, SnapshotError
from dktv.baselines import (
    SingleDnnModel,
    TvdmdTracker,
    single_dnn_predict,
    single_dnn_train,
    tvdmd_predict,
)
from dktv.bounds import BatchHistory, ErrorBoundReport, one_step_errors, report_for
from dktv.config import ExperimentConfig
from dktv.core import DataBatch, DkrSnapshot, OnlineDktv, TrainConfig, predict_one
from dktv.mpc import ClosedLoopResult, pretrain_learner, receding_horizon_run
from dktv.persistence import (
    RunManifest,
    SnapshotStore,
    data_hash,
    write_json,
    write_table_csv,
)
from dktv.systems import (
    CARTPOLE_STATE_NAMES,
    SAMPLE_INTERVAL,
    Cartpole,
    CartpoleConfig,
    CartpoleExcitation,
    InputSource,
    Quadcopter,
    QuadWaypointController,
    SampledTrajectory,
    SimpleNtvs,
    SimpleNtvsConfig,
    sample_trajectory,
)
from dktv.verdict import Assertion, Experiment, Metric, Results, Summary

log: logging.Logger = logging.getLogger(__name__)

T = typing.TypeVar("T")
ItemT = typing.TypeVar("ItemT")

DEFAULT_THRESHOLDS: dict[str, dict[str, str]] = {
    "simple-ntvs": {"dktv_win_rate_gamma6": "1:1"},
    "quad-predict": {"dktv_loss_win_rate": "1:1"},
    "nh-sweep": {"error_decreases": "1:1", "data_identical": "1:1"},
    "mpc-cartpole": {"max_abs_theta": "0:0.2", "falls": "0:0"},
    "bound-report": {"unexplained_violations": "0:0"},
}


def fan_out(fn: Callable[[ItemT], T], items: Iterable[ItemT], jobs: int = 1) -> list[T]:
    """``[fn(item) for item in items]``, on ``jobs`` worker threads when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="dktv") as pool:
        return list(pool.map(fn, items))


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def held_errors(
    snapshots: Sequence[DkrSnapshot], batches: Sequence[DataBatch]
) -> tuple[np.ndarray, np.ndarray]:
    """One-step errors on batch ``τ`` of the snapshot learned on batch ``τ−1``.

    This is the error the model in use actually makes while the next batch
    is being collected.
    """
    indices, errors = [], []
    for tau in range(1, len(batches)):
        k, e = one_step_errors(snapshots[tau - 1], batches[tau])
        indices.append(k)
        errors.append(e)
    if not indices:
        return np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(indices), np.concatenate(errors)


def held_predictions(
    predict: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
    batches: Sequence[DataBatch],
) -> np.ndarray:
    """``n×K`` one-step predictions, ``predict(tau, x, u)`` uses the model of batch ``tau``."""
    columns = []
    for tau in range(1, len(batches)):
        batch = batches[tau]
        for i in range(batch.beta):
            columns.append(predict(tau - 1, batch.X[:, i], batch.U[:, i]))
    if not columns:
        return np.zeros((batches[0].n if batches else 0, 0))
    return np.column_stack(columns)


def read_oracle(path: typing.Optional[typing.Union[str, Path]]) -> dict[str, float]:
    if path is None or not Path(path).is_file():
        return {}
    return {k: float(v) for k, v in json.loads(Path(path).read_text(encoding="utf-8")).items()}


class ExperimentSummary(Summary):
    """Names the asserted metrics in the status line of a passing run."""

    def ok(self, results: Results) -> str:
        judged = [
            str(r)
            for r in results
            if r.metric is not None
            and r.metric.has_assertion
            and r.metric.assertion.expected is not None
        ]
        return ", ".join(judged) if judged else super().ok(results)


class DktvExperiment(Experiment):
    """Common run bookkeeping: output directory, manifest, assertions.

    :param config: Validated configuration.
    :param write_oracle: Record the reference errors of this run into the
        oracle file instead of judging against it.
    """

    experiment_id: typing.ClassVar[str] = ""
    config: ExperimentConfig
    out: Path
    artifacts: list[Path]
    data_hashes: dict[str, str]

    def __init__(self, config: ExperimentConfig, write_oracle: bool = False) -> None:
        self.config = config
        self.write_oracle = write_oracle
        self.out = Path(config.out) / config.experiment
        self.artifacts = []
        self.data_hashes = {}

    @property
    def name(self) -> str:
        return self.experiment_id

    def train_config(self, seed: int) -> TrainConfig:
        train = self.config.train
        if self.write_oracle:
            # reference errors come from a longer trained run
            train = dataclasses.replace(
                train, epochs=train.epochs * self.config.oracle_epochs_factor
            )
        return dataclasses.replace(train, seed=seed)

    def oracle_path(self) -> Path:
        return Path(self.config.oracle) if self.config.oracle else self.out / "oracle.json"

    def oracle_metrics(self, metrics: Sequence[Metric]) -> dict[str, float]:
        """Metrics whose recorded value turns into an absolute threshold."""
        return {}

    def assertions(self) -> list[Assertion]:
        thresholds = dict(DEFAULT_THRESHOLDS.get(self.experiment_id, {}))
        if not self.write_oracle:
            slack = self.config.oracle_slack
            for name, value in read_oracle(self.config.oracle).items():
                thresholds.setdefault(name, f"0:{slack * value:.6g}")
        thresholds.update(self.config.thresholds)
        return [Assertion(name, spec) for name, spec in sorted(thresholds.items())]

    def _artifact(self, path: Path) -> Path:
        self.artifacts.append(path)
        return path

    def table(self, filename: str, columns: Sequence[str], rows: typing.Any) -> Path:
        return self._artifact(write_table_csv(self.out / filename, columns, rows))

    def plot(self, render: Callable[..., Path], filename: str, *args: typing.Any, **kwargs: typing.Any) -> None:
        if self.config.plots:
            self._artifact(render(self.out / filename, *args, **kwargs))

    def run(self) -> list[Metric]:
        raise NotImplementedError

    def probe(self) -> list[Metric]:
        self.out.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        log.info("running %s into %s", self.experiment_id, self.out)
        metrics = self.run()
        runtime = time.perf_counter() - started
        metrics.append(Metric("runtime", runtime, "s"))
        if self.write_oracle:
            recorded = self.oracle_metrics(metrics)
            write_json(self.oracle_path(), recorded)
            log.warning("recorded %d oracle values in %s", len(recorded), self.oracle_path())
        with RunManifest(self.out / "manifest.json") as manifest:
            manifest["experiment"] = self.experiment_id
            manifest["config"] = self.config.to_dict()
            manifest["seeds"] = list(self.config.seeds)
            manifest["data_sha256"] = dict(self.data_hashes)
            manifest["metrics"] = {
                m.name: m.value for m in metrics if m.name != "runtime"
            }
            manifest["artifacts"] = sorted(
                str(p.relative_to(self.out)) for p in self.artifacts
            )
        return metrics


# Simple time-varying system #################################################


class _NtvsReplica(typing.NamedTuple):
    gamma: float
    seed: int
    trajectory: SampledTrajectory
    learner: OnlineDktv
    tracker: TvdmdTracker
    dktv_errors: np.ndarray
    tvdmd_errors: np.ndarray
    indices: np.ndarray


class SimpleNtvsExperiment(DktvExperiment):
    """DKTV against TVDMD on ``ẋ = M_t cos(x)`` for slow and fast variation."""

    experiment_id = "simple-ntvs"

    def _replica(self, item: tuple[float, int]) -> _NtvsReplica:
        gamma, seed = item
        base = self.config.system
        if not isinstance(base, SimpleNtvsConfig):
            raise ConfigError("simple-ntvs needs the simple_ntvs system")
        x0 = self.config.x0 or base.x0
        system = SimpleNtvs(dataclasses.replace(base, gamma=gamma))
        trajectory = sample_trajectory(system, None, x0, n_steps=self.config.n_steps, seed=seed)
        learner = OnlineDktv(self.config.net, self.config.beta, self.train_config(seed))
        learner.fit_stream(trajectory.states)
        tracker = TvdmdTracker()
        for batch in learner.batches:
            tracker.update(batch)
        indices, dktv_errors = held_errors(learner.snapshots, learner.batches)
        tvdmd = held_predictions(
            lambda tau, x, u: tvdmd_predict(tracker.models[tau], x, u), learner.batches
        )
        tvdmd_errors = np.linalg.norm(tvdmd - trajectory.states[:, indices], axis=0)
        log.info(
            "γ=%g seed %d: mean error DKTV %.4g, TVDMD %.4g",
            gamma,
            seed,
            _mean(dktv_errors),
            _mean(tvdmd_errors),
        )
        return _NtvsReplica(
            gamma, seed, trajectory, learner, tracker, dktv_errors, tvdmd_errors, indices
        )

    def oracle_metrics(self, metrics: Sequence[Metric]) -> dict[str, float]:
        return {
            m.name: float(m.value) for m in metrics if m.name.startswith("mean_error_dktv_")
        }

    def run(self) -> list[Metric]:
        items = [(g, s) for g in self.config.gammas for s in self.config.seeds]
        replicas = fan_out(self._replica, items, self.config.jobs)
        metrics: list[Metric] = []
        for gamma in self.config.gammas:
            group = [r for r in replicas if r.gamma == gamma]
            tag = f"gamma{gamma:g}"
            first = group[0]
            self.data_hashes[tag] = data_hash(first.trajectory.states)
            self._write_group(tag, group)
            if self.config.save_snapshots:
                store = SnapshotStore(self.out / "snapshots" / tag)
                for snapshot, batch in zip(first.learner.snapshots, first.learner.batches):
                    store.save(snapshot, batch, dataclasses.asdict(first.learner.config))
            wins = [_mean(r.dktv_errors) < _mean(r.tvdmd_errors) for r in group]
            metrics += [
                Metric(f"mean_error_dktv_{tag}", _mean([_mean(r.dktv_errors) for r in group])),
                Metric(f"mean_error_tvdmd_{tag}", _mean([_mean(r.tvdmd_errors) for r in group])),
                Metric(f"dktv_win_rate_{tag}", sum(wins) / len(wins)),
                Metric(
                    f"diverged_batches_{tag}",
                    sum(s.diverged for r in group for s in r.learner.snapshots),
                ),
            ]
        return metrics

    def _write_group(self, tag: str, group: Sequence[_NtvsReplica]) -> None:
        from dktv import plotting

        first = group[0]
        times = first.indices * SAMPLE_INTERVAL
        self.table(
            f"errors_{tag}.csv",
            ["k", "t", "e_tvdmd", *[f"e_dktv_seed{r.seed}" for r in group]],
            np.column_stack(
                [first.indices, times, first.tvdmd_errors, *[r.dktv_errors for r in group]]
            ),
        )
        snapshots = first.learner.snapshots
        dktv = held_predictions(
            lambda tau, x, u: predict_one(snapshots[tau], x, u), first.learner.batches
        )
        tvdmd = held_predictions(
            lambda tau, x, u: tvdmd_predict(first.tracker.models[tau], x, u),
            first.learner.batches,
        )
        truth = first.trajectory.states[:, first.indices]
        self.table(
            f"trajectory_{tag}.csv",
            ["t", "x1", "x2", "dktv_x1", "dktv_x2", "tvdmd_x1", "tvdmd_x2"],
            np.column_stack([times, truth.T, dktv.T, tvdmd.T]),
        )
        self.plot(
            plotting.plot_series,
            f"errors_{tag}.svg",
            times,
            {"DKTV": first.dktv_errors, "TVDMD": first.tvdmd_errors},
            "t [s]",
            "one-step error",
            logy=True,
        )
        self.plot(
            plotting.plot_trajectories,
            f"trajectory_{tag}.svg",
            times,
            truth,
            {"DKTV": dktv, "TVDMD": tvdmd},
            ["x1", "x2"],
        )


# Quadcopter #################################################################


class _QuadReplica(typing.NamedTuple):
    seed: int
    trajectory: SampledTrajectory
    learner: OnlineDktv
    dnn_models: list[SingleDnnModel]
    dnn_losses: list[tuple[float, ...]]
    indices: np.ndarray
    dktv_errors: np.ndarray
    dnn_errors: np.ndarray

    @property
    def dktv_final_loss(self) -> float:
        current = self.learner.current
        return current.final_loss if current is not None else math.nan

    @property
    def dnn_final_loss(self) -> float:
        losses = self.dnn_losses[-1] if self.dnn_losses else ()
        return losses[-1] if losses else math.nan


def quad_trajectory(config: ExperimentConfig, seed: int) -> SampledTrajectory:
    quad = config.build_system(seed=seed)
    if not isinstance(quad, Quadcopter):
        raise ConfigError(f"{config.experiment} needs the quadcopter system")
    controller = QuadWaypointController(quad)
    return sample_trajectory(quad, controller, np.zeros(12), n_steps=config.n_steps, seed=seed)


class QuadPredictExperiment(DktvExperiment):
    """DKTV against a single one-step network on a disturbed quadcopter flight."""

    experiment_id = "quad-predict"

    def _replica(self, seed: int) -> _QuadReplica:
        trajectory = quad_trajectory(self.config, seed)
        train = self.train_config(seed)
        learner = OnlineDktv(self.config.net, self.config.beta, train)
        learner.fit_stream(trajectory.states, trajectory.inputs)
        model = SingleDnnModel.build(
            trajectory.states.shape[0],
            trajectory.inputs.shape[0],
            hidden=self.config.dnn_hidden,
            hidden_activation=self.config.net.hidden_activation,
            seed=seed,
        )
        models, losses = [], []
        for batch in learner.batches:
            training = single_dnn_train(model, batch, train)
            if training.diverged:
                log.warning("single-DNN diverged on batch %d, keeping the previous weights", batch.tau)
            else:
                model = training.model
            models.append(model)
            losses.append(training.losses)
        indices, dktv_errors = held_errors(learner.snapshots, learner.batches)
        dnn = held_predictions(
            lambda tau, x, u: single_dnn_predict(models[tau], x, u), learner.batches
        )
        dnn_errors = np.linalg.norm(dnn - trajectory.states[:, indices], axis=0)
        return _QuadReplica(
            seed, trajectory, learner, models, losses, indices, dktv_errors, dnn_errors
        )

    def run(self) -> list[Metric]:
        from dktv import plotting

        replicas = fan_out(self._replica, self.config.seeds, self.config.jobs)
        for r in replicas:
            self.data_hashes[f"seed{r.seed}"] = data_hash(r.trajectory.states)
            rows = []
            for tau, (snapshot, dnn_losses) in enumerate(zip(r.learner.snapshots, r.dnn_losses)):
                dktv_losses = [record.total for record in snapshot.train_stats]
                for epoch in range(max(len(dktv_losses), len(dnn_losses))):
                    rows.append(
                        [
                            tau,
                            epoch + 1,
                            dktv_losses[epoch] if epoch < len(dktv_losses) else math.nan,
                            dnn_losses[epoch] if epoch < len(dnn_losses) else math.nan,
                        ]
                    )
            self.table(
                f"loss_trace_seed{r.seed}.csv", ["batch", "epoch", "dktv_loss", "dnn_loss"], rows
            )
            self.table(
                f"errors_seed{r.seed}.csv",
                ["k", "t", "e_dktv", "e_dnn"],
                np.column_stack([r.indices, r.indices * SAMPLE_INTERVAL, r.dktv_errors, r.dnn_errors]),
            )
            trace = np.array(rows).reshape(-1, 4)
            self.plot(
                plotting.plot_series,
                f"loss_trace_seed{r.seed}.svg",
                np.arange(len(trace)),
                {"DKTV": trace[:, 2], "single DNN": trace[:, 3]},
                "epoch (all batches)",
                "training loss",
                logy=True,
            )
            self.plot(
                plotting.plot_series,
                f"errors_seed{r.seed}.svg",
                r.indices * SAMPLE_INTERVAL,
                {"DKTV": r.dktv_errors, "single DNN": r.dnn_errors},
                "t [s]",
                "one-step error",
                logy=True,
            )
        wins = [r.dktv_final_loss < r.dnn_final_loss for r in replicas]
        return [
            Metric("dktv_final_loss", _mean([r.dktv_final_loss for r in replicas])),
            Metric("dnn_final_loss", _mean([r.dnn_final_loss for r in replicas])),
            Metric("dktv_loss_win_rate", sum(wins) / len(wins)),
            Metric("mean_error_dktv", _mean([_mean(r.dktv_errors) for r in replicas])),
            Metric("mean_error_dnn", _mean([_mean(r.dnn_errors) for r in replicas])),
            Metric("batches", len(replicas[0].learner.batches)),
        ]


# Hidden width sweep #########################################################


class _WidthReplica(typing.NamedTuple):
    width: int
    mean_error: float
    final_loss: float
    data_sha256: str
    reports: list[ErrorBoundReport]


def _input_source(config: ExperimentConfig, seed: int) -> typing.Optional[InputSource]:
    system = config.build_system()
    if isinstance(system, Quadcopter):
        return QuadWaypointController(system)
    if isinstance(system, Cartpole):
        return CartpoleExcitation(system, noise=config.mpc.excitation_noise, seed=seed)
    return None


def _initial_state(config: ExperimentConfig) -> np.ndarray:
    if config.x0 is not None:
        return np.asarray(config.x0, dtype=float)
    if isinstance(config.system, SimpleNtvsConfig):
        return np.asarray(config.system.x0, dtype=float)
    if isinstance(config.system, CartpoleConfig):
        return np.array([0.0, 0.0, 0.05, 0.0])
    return np.zeros(config.build_system().n)


class WidthSweepExperiment(DktvExperiment):
    """Mean DKTV prediction error against the hidden width ``n_h`` on shared data."""

    experiment_id = "nh-sweep"

    def _data(self) -> SampledTrajectory:
        seed = self.config.seeds[0]
        system = self.config.build_system()
        if isinstance(system, Quadcopter):
            return quad_trajectory(self.config, seed)
        return sample_trajectory(
            system,
            _input_source(self.config, seed),
            _initial_state(self.config),
            n_steps=self.config.n_steps,
            seed=seed,
        )

    def _replica(self, item: tuple[int, SampledTrajectory]) -> _WidthReplica:
        width, trajectory = item
        seed = self.config.seeds[0]
        layers = len(self.config.net.hidden) or 1
        net = dataclasses.replace(self.config.net, hidden=(width,) * layers)
        learner = OnlineDktv(net, self.config.beta, self.train_config(seed))
        learner.fit_stream(trajectory.states, trajectory.inputs if trajectory.inputs.size else None)
        seen = np.hstack([b.states for b in learner.batches]) if learner.batches else np.zeros(0)
        _, errors = held_errors(learner.snapshots, learner.batches)
        history = BatchHistory.from_snapshots(learner.snapshots)
        reports = [
            report_for(
                learner.batches[tau],
                learner.snapshots[tau - 1],
                history,
                norm=self.config.norm,
                lipschitz_pairs=self.config.lipschitz_pairs,
                seed=seed,
            )
            for tau in range(1, len(learner.batches))
        ]
        current = learner.current
        return _WidthReplica(
            width,
            _mean(errors),
            current.final_loss if current is not None else math.nan,
            data_hash(seen),
            reports,
        )

    def run(self) -> list[Metric]:
        from dktv import plotting

        trajectory = self._data()
        self.data_hashes["stream"] = data_hash(trajectory.states)
        widths = list(self.config.widths)
        replicas = fan_out(
            self._replica, [(w, trajectory) for w in widths], self.config.jobs
        )
        for r in replicas:
            self._artifact(
                write_json(
                    self.out / f"bounds_nh{r.width}.json", [rep.to_dict() for rep in r.reports]
                )
            )
        self.table(
            "nh_sweep.csv",
            ["n_h", "mean_error", "final_loss", "bound_violations"],
            [
                [r.width, r.mean_error, r.final_loss, sum(rep.violated for rep in r.reports)]
                for r in replicas
            ],
        )
        self.plot(
            plotting.plot_width_table,
            "nh_sweep.svg",
            widths,
            [r.mean_error for r in replicas],
        )
        narrow = min(replicas, key=lambda r: r.width)
        wide = max(replicas, key=lambda r: r.width)
        metrics = [Metric(f"mean_error_nh{r.width}", r.mean_error) for r in replicas]
        metrics += [
            Metric("error_decreases", wide.mean_error < narrow.mean_error),
            Metric("data_identical", len({r.data_sha256 for r in replicas}) == 1),
        ]
        return metrics


# Receding-horizon control ###################################################


class MpcCartpoleExperiment(DktvExperiment):
    """Balance the cartpole upright with MPC on the continually relearned DKR."""

    experiment_id = "mpc-cartpole"

    def _replica(self, seed: int) -> ClosedLoopResult:
        system = self.config.build_system()
        if not isinstance(system, Cartpole):
            raise ConfigError("mpc-cartpole needs the cartpole system")
        mpc = self.config.mpc
        learner = OnlineDktv(self.config.net, self.config.beta, self.train_config(seed))
        x = pretrain_learner(
            learner,
            system,
            mpc.pretrain_steps,
            seed=seed,
            noise=mpc.excitation_noise,
            x0=_initial_state(self.config),
        )
        problem = mpc.problem(system.n, system.m)
        result = receding_horizon_run(system, learner, problem, self.config.duration, x)
        log.info(
            "seed %d: max |θ̄| %.4g rad over %.1f s, %d model updates%s",
            seed,
            result.max_abs_theta,
            result.duration,
            result.model_updates,
            ", the pole fell" if result.failed else "",
        )
        return result

    def run(self) -> list[Metric]:
        from dktv import plotting

        results = fan_out(self._replica, self.config.seeds, self.config.jobs)
        for seed, result in zip(self.config.seeds, results):
            self.data_hashes[f"seed{seed}"] = data_hash(result.states)
            self.table(
                f"closed_loop_seed{seed}.csv",
                ["t", *CARTPOLE_STATE_NAMES, "F", "mu_c", "solve_iters", "cost"],
                np.column_stack(
                    [
                        result.times,
                        result.states.T,
                        result.inputs.T,
                        result.mu_c,
                        result.iterations,
                        result.costs,
                    ]
                ),
            )
            self.plot(plotting.plot_closed_loop, f"closed_loop_seed{seed}.svg", result)
        return [
            Metric("max_abs_theta", max(r.max_abs_theta for r in results), "rad"),
            Metric("falls", sum(r.failed for r in results)),
            Metric("final_mu_c", float(results[0].mu_c[-1]) if results[0].mu_c.size else math.nan),
            Metric("model_updates", min(r.model_updates for r in results)),
            Metric(
                "unconverged_solves",
                sum(int(np.sum(r.iterations >= self.config.mpc.max_iterations)) for r in results),
            ),
        ]


# Error bounds ###############################################################


BOUND_COLUMNS: tuple[str, ...] = (
    "tau",
    "mu_x",
    "mu_u",
    "mu_g",
    "L1",
    "L2",
    "L_a",
    "L_b",
    "L_c",
    "total_bound",
    "asymptotic_bound",
    "max_observed",
    "violated",
    "breaches",
)


def bound_row(report: ErrorBoundReport) -> list[float]:
    return [
        report.tau,
        report.mu_x,
        report.mu_u,
        report.mu_g,
        report.L1,
        report.L2,
        report.L_a,
        report.L_b,
        report.L_c,
        report.total_bound,
        report.asymptotic_bound,
        report.max_observed,
        float(report.violated),
        len(report.assumption_breaches),
    ]


class BoundReportExperiment(DktvExperiment):
    """Error bound of every stored snapshot, validated on the batch that follows it."""

    experiment_id = "bound-report"

    def snapshot_dir(self) -> Path:
        if self.config.snapshots is not None:
            return Path(self.config.snapshots)
        return Path(self.config.out) / "simple-ntvs" / "snapshots" / f"gamma{self.config.gammas[0]:g}"

    def run(self) -> list[Metric]:
        snapshots, batches = SnapshotStore(self.snapshot_dir()).load_all()
        if len(snapshots) < 2:
            raise SnapshotError("a bound report needs snapshots of at least two batches")
        history = BatchHistory.from_snapshots(snapshots)
        reports = [
            report_for(
                batches[tau],
                snapshots[tau - 1],
                history,
                norm=self.config.norm,
                lipschitz_pairs=self.config.lipschitz_pairs,
                seed=self.config.seeds[0],
            )
            for tau in range(1, len(snapshots))
        ]
        self._artifact(write_json(self.out / "bounds.json", [r.to_dict() for r in reports]))
        self.table("bounds.csv", BOUND_COLUMNS, [bound_row(r) for r in reports])
        ratios = [
            r.max_observed / r.total_bound for r in reports if r.total_bound > 0.0
        ]
        return [
            Metric("batches_reported", len(reports)),
            Metric("violated_batches", sum(r.violated for r in reports)),
            Metric(
                "unexplained_violations",
                sum(r.violated and not r.assumption_breaches for r in reports),
            ),
            Metric("max_error_to_bound", max(ratios, default=math.nan)),
        ]


EXPERIMENT_CLASSES: dict[str, type[DktvExperiment]] = {
    cls.experiment_id: cls
    for cls in (
        SimpleNtvsExperiment,
        QuadPredictExperiment,
        WidthSweepExperiment,
        MpcCartpoleExperiment,
        BoundReportExperiment,
    )
}


def create_experiment(config: ExperimentConfig, write_oracle: bool = False) -> DktvExperiment:
    """:raises DktvError: For an experiment without an implementation."""
    try:
        return EXPERIMENT_CLASSES[config.experiment](config, write_oracle=write_oracle)
    except KeyError as e:
        raise DktvError(f"no experiment {config.experiment!r}") from e
