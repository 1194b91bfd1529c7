import logging
import math
from io import StringIO
from typing import Any

import pytest

from dktv import DktvError
from dktv.verdict import (
    Assertion,
    Experiment,
    Metric,
    Range,
    Result,
    Results,
    Summary,
    Verdict,
    VerdictState,
    _Runtime,
    error,
    failed,
    guarded,
    passed,
)


class Fixed(Experiment):
    def __init__(self, *metrics: Metric) -> None:
        self.metrics = metrics

    def probe(self) -> list[Metric]:
        logging.getLogger("dktv.fixed").warning("probing %d metrics", len(self.metrics))
        return list(self.metrics)


class Broken(Experiment):
    def probe(self) -> list[Metric]:
        raise DktvError("no snapshots in runs/simple-ntvs")


class TestRangeParse:
    def test_empty_range_is_zero_to_infinity(self) -> None:
        r = Range("")
        assert not r.invert
        assert r.start == 0
        assert r.end == float("inf")

    def test_null_range(self) -> None:
        assert Range() == Range("")

    def test_explicit_start_end(self) -> None:
        r = Range("0.5:4")
        assert r.start == 0.5
        assert r.end == 4

    def test_fail_if_start_gt_end(self) -> None:
        pytest.raises(ValueError, Range, "4:3")

    def test_number(self) -> None:
        r = Range(0.2)
        assert (r.start, r.end) == (0, 0.2)

    def test_start_is_neg_infinity(self) -> None:
        assert Range("~:1").start == -math.inf

    def test_invert(self) -> None:
        assert Range("@0:1").invert

    def test_parts(self) -> None:
        assert Range(start=1, end=1) == Range("1:1")

    def test_spec_and_parts_exclude_each_other(self) -> None:
        with pytest.raises(ValueError, match="not both"):
            Range("1", start=2)

    def test_copy(self) -> None:
        assert Range(Range("@~:3")) == Range("@~:3")


class TestRangeMatch:
    @pytest.mark.parametrize(
        "spec, inside, outside",
        [
            ("0.2", [0, 0.1, 0.2], [-0.1, 0.21]),
            ("5:", [5, 1e9], [4.99]),
            ("~:1", [-1e9, 1], [1.01]),
            ("1:1", [1, True], [0, False]),
            ("@0:1", [-0.5, 2], [0, 0.5, 1]),
        ],
    )
    def test_match(self, spec: str, inside: list[float], outside: list[float]) -> None:
        r = Range(spec)
        assert all(v in r for v in inside)
        assert not any(v in r for v in outside)

    @pytest.mark.parametrize("spec", ["0.2", "5:", "~:1", "@1:2", "1:1"])
    def test_str(self, spec: str) -> None:
        assert str(Range(spec)) == spec

    def test_violation(self) -> None:
        assert Range("0.2").violation == "outside range 0:0.2"
        assert Range("@0:1").violation == "inside excluded range 0:1"


class TestVerdictState:
    def test_order(self) -> None:
        assert error > failed > passed

    def test_from_exit_code(self) -> None:
        assert VerdictState.state(1) == failed
        with pytest.raises(DktvError, match="not a verdict"):
            VerdictState.state(3)

    def test_int_and_str(self) -> None:
        assert int(error) == 2
        assert str(failed) == "failed"


class TestMetric:
    def test_valueunit(self) -> None:
        assert Metric("max_abs_theta", 0.123456, "rad").valueunit == "0.1235rad"
        assert Metric("falls", 2).valueunit == "2"
        assert Metric("data_identical", True).valueunit == "True"

    def test_assertion_name_defaults_to_metric_name(self) -> None:
        assert Metric("falls", 0).assertion_name == "falls"
        assert Metric("falls_seed1", 0, assertion="falls").assertion_name == "falls"

    def test_unset_experiment(self) -> None:
        with pytest.raises(RuntimeError):
            Metric("falls", 0).experiment


class TestAssertion:
    def test_pass_and_fail(self) -> None:
        assertion = Assertion("falls", "0:0")
        experiment = Fixed()
        assert assertion.evaluate(Metric("falls", 0), experiment).state == passed
        result = assertion.evaluate(Metric("falls", 1), experiment)
        assert result.state == failed
        assert result.hint == "outside range 0:0"

    def test_nan_fails(self) -> None:
        result = Assertion("x", "0:1").evaluate(Metric("x", math.nan), Fixed())
        assert result.state == failed
        assert result.hint == "value is NaN"

    def test_observation_always_passes(self) -> None:
        assert Assertion("runtime").evaluate(Metric("runtime", 1e9), Fixed()).state == passed

    def test_custom_format(self) -> None:
        assertion = Assertion("falls", "0:0", fmt_metric="{value} falls")
        metric = Metric("falls", 3, assertion=assertion)
        assert metric.description == "3 falls"


class TestResults:
    def test_worst_first(self) -> None:
        results = Results(Result(passed, "a"), Result(error, "b"), Result(failed, "c"))
        assert [r.hint for r in results] == ["b", "c", "a"]
        assert results.most_significant_state == error
        assert results.first_significant.hint == "b"

    def test_by_name(self) -> None:
        metric = Metric("falls", 0)
        results = Results(Result(passed, None, metric))
        assert "falls" in results
        assert results["falls"].metric is metric

    def test_rejects_other_objects(self) -> None:
        with pytest.raises(ValueError):
            Results().add("passed")  # type: ignore[arg-type]


class TestSummary:
    def test_ok_counts_results(self) -> None:
        assert Summary().ok(Results(Result(passed, "a"), Result(passed, "b"))) == "2 assertions hold"

    def test_problem_returns_first_significant(self) -> None:
        results = Results(Result(passed, "result 1"), Result(failed, "result 2"))
        assert Summary().problem(results) == "result 2"

    def test_verbose(self) -> None:
        assert ["error: reason1", "failed: reason2", "passed: fine"] == Summary().verbose(
            Results(Result(error, "reason1"), Result(passed, "fine"), Result(failed, "reason2"))
        )


class TestVerdict:
    def test_passed(self) -> None:
        verdict = Verdict(Fixed(Metric("falls", 0)), Assertion("falls", "0:0"))
        verdict()
        assert verdict.state == passed
        assert verdict.exitcode == 0
        assert verdict.name == "Fixed"
        assert verdict.summary == "1 assertions hold"

    def test_failed(self) -> None:
        verdict = Verdict(
            Fixed(Metric("max_abs_theta", 0.3, "rad"), Metric("falls", 0)),
            Assertion("max_abs_theta", "0:0.2"),
            Assertion("falls", "0:0"),
        )
        verdict()
        assert verdict.exitcode == 1
        assert verdict.summary == "max_abs_theta is 0.3rad (outside range 0:0.2)"

    def test_unjudged_metric_is_reported(self) -> None:
        verdict = Verdict(Fixed(Metric("runtime", 12.5, "s")))
        verdict()
        assert verdict.state == passed
        assert verdict.verbose == ["passed: runtime is 12.5s"]

    def test_experiment_error(self) -> None:
        verdict = Verdict(Broken())
        verdict()
        assert verdict.exitcode == 2
        assert verdict.summary == "no snapshots in runs/simple-ntvs"

    def test_no_results_is_an_error(self) -> None:
        verdict = Verdict(Fixed())
        verdict()
        assert verdict.state == error
        assert verdict.summary == "no results"

    def test_rejects_unknown_objects(self) -> None:
        with pytest.raises(TypeError):
            Verdict(42)  # type: ignore[arg-type]


class TestRuntime:
    r: _Runtime

    def setup_method(self) -> None:
        _Runtime.reset()
        self.r = _Runtime()
        self.r.sysexit = lambda: None  # type: ignore
        self.r.stdout = StringIO()

    def teardown_method(self) -> None:
        _Runtime.reset()

    def output(self) -> str:
        assert self.r.stdout is not None
        return self.r.stdout.getvalue()

    def test_runtime_is_singleton(self) -> None:
        assert self.r is _Runtime()

    def test_verbose(self) -> None:
        testcases: list[tuple[Any, int, int]] = [
            (None, logging.WARNING, 0),
            (1, logging.WARNING, 1),
            ("vv", logging.INFO, 2),
            (3, logging.DEBUG, 3),
            ("vvvv", logging.DEBUG, 3),
        ]
        for argument, exp_level, exp_verbose in testcases:
            self.r.verbose = argument
            assert exp_level == self.r.logchan.level
            assert exp_verbose == self.r.verbose

    def test_execute_prints_status_and_log(self) -> None:
        verdict = Verdict(Fixed(Metric("falls", 0)), Assertion("falls", "0:0"))
        self.r.execute(verdict, verbose=0)  # type: ignore[misc]
        assert self.r.exitcode == 0
        lines = self.output().splitlines()
        assert lines[0] == "DKTV FIXED PASSED - 1 assertions hold"
        assert lines[1] == "WARNING dktv.fixed: probing 1 metrics"

    def test_verbose_lists_metrics(self) -> None:
        verdict = Verdict(
            Fixed(Metric("falls", 1)), Assertion("falls", "0:0"), name="mpc-cartpole"
        )
        self.r.execute(verdict, verbose=1)  # type: ignore[misc]
        assert self.r.exitcode == 1
        lines = self.output().splitlines()
        assert lines[0] == "DKTV MPC-CARTPOLE FAILED - falls is 1 (outside range 0:0)"
        assert lines[1] == "failed: falls is 1 (outside range 0:0)"

    def test_colorized_log(self) -> None:
        self.r.execute(Verdict(Fixed(Metric("falls", 0))), verbose=0, colorize=True)  # type: ignore[misc]
        assert "\033[93mWARNING dktv.fixed" in self.output()

    def test_guarded_reports_exceptions(self) -> None:
        @guarded(verbose=0)
        def main() -> None:
            raise ValueError("boom")

        main()
        assert self.r.exitcode == 2
        assert self.output() == "DKTV ERROR - ValueError: boom\n"

    def test_guarded_with_traceback(self) -> None:
        @guarded(verbose=1)
        def main() -> None:
            raise ValueError("boom")

        main()
        assert "Traceback (most recent call last)" in self.output()

    def test_guarded_passes_system_exit(self) -> None:
        @guarded
        def main() -> None:
            raise SystemExit(1)

        with pytest.raises(SystemExit):
            main()
