"""Acceptance harness: experiments emit metrics, assertions judge them.

An :class:`Experiment` runs in :meth:`~Experiment.probe` and returns
:class:`Metric` objects. Every metric is routed to the :class:`Assertion`
of the same name, which checks the value against a threshold
:class:`Range` and produces a :class:`Result`. The :class:`Verdict`
controller collects the results, prints the status line and exits with
``0`` (passed), ``1`` (failed) or ``2`` (error).
"""

from __future__ import annotations

import collections
import functools
import io
import logging
import math
import numbers
import sys
import traceback
import typing

import typing_extensions

from dktv import DktvError

log: logging.Logger = logging.getLogger(__name__)


class VerdictState:
    """Outcome of an assertion or of a whole run.

    :param code: Process exit code, ``0``, ``1`` or ``2``.
    :param text: Upper-cased in the status line.
    """

    code: int
    text: str

    def __init__(self, code: int, text: str) -> None:
        self.code = code
        self.text = text

    def __str__(self) -> str:
        return self.text

    def __int__(self) -> int:
        return self.code

    def __gt__(self, other: typing.Any) -> bool:
        return isinstance(other, VerdictState) and self.code > other.code

    def __eq__(self, other: typing.Any) -> bool:
        return (
            isinstance(other, VerdictState)
            and self.code == other.code
            and self.text == other.text
        )

    def __hash__(self) -> int:
        return hash((self.code, self.text))

    def __repr__(self) -> str:
        return f"VerdictState({self.code}, {self.text!r})"

    @staticmethod
    def state(exit_code: int) -> VerdictState:
        """The state belonging to ``exit_code``.

        :raises DktvError: For codes other than ``0``, ``1`` and ``2``.
        """
        for state in (passed, failed, error):
            if state.code == exit_code:
                return state
        raise DktvError(f"exit code {exit_code} is not a verdict")


passed: VerdictState = VerdictState(0, "passed")
"""Every embedded assertion holds."""

failed: VerdictState = VerdictState(1, "failed")
"""The run completed but at least one assertion is violated."""

error: VerdictState = VerdictState(2, "error")
"""The run could not be judged: bad configuration, missing snapshots or an
exception inside an experiment."""


RangeSpec = typing.Union[str, int, float, "Range"]


class Range:
    """Threshold range in the syntax ``[@][start:][end]``.

    ``start:`` may be left out when it is ``0``, ``~`` stands for negative
    infinity and an omitted ``end`` for positive infinity. A leading ``@``
    inverts the range, values then match when they lie *outside*.

    ======== ==========================
    ``0.2``  ``0 ≤ x ≤ 0.2``
    ``5:``   ``x ≥ 5``
    ``~:1``  ``x ≤ 1``
    ``1:1``  ``x = 1`` (true booleans)
    ``@0:1`` ``x < 0`` or ``x > 1``
    ======== ==========================

    An empty specification matches every value from ``0`` upwards.
    """

    invert: bool
    start: float
    end: float

    def __init__(
        self,
        spec: typing.Optional[RangeSpec] = None,
        invert: typing.Optional[bool] = None,
        start: typing.Optional[float] = None,
        end: typing.Optional[float] = None,
    ) -> None:
        explicit = not (invert is None and start is None and end is None)
        if spec is not None and explicit:
            raise ValueError("give either a range specification or its parts, not both")
        if isinstance(spec, Range):
            self.invert, self.start, self.end = spec.invert, spec.start, spec.end
        elif isinstance(spec, (int, float)):
            self.invert, self.start, self.end = False, 0, spec
        elif spec is None and explicit:
            self.invert = bool(invert)
            self.start = 0 if start is None else start
            self.end = math.inf if end is None else end
        else:
            self.start, self.end, self.invert = Range._parse(spec or "")
        if self.start > self.end:
            raise ValueError(f"start {self.start} must not be greater than end {self.end}")

    @classmethod
    def _parse(cls, spec: str) -> tuple[float, float, bool]:
        spec = spec.strip()
        invert = spec.startswith("@")
        if invert:
            spec = spec[1:]
        start_str, _, end_str = spec.rpartition(":")
        start = -math.inf if start_str == "~" else cls._parse_atom(start_str, 0)
        return start, cls._parse_atom(end_str, math.inf), invert

    @staticmethod
    def _parse_atom(atom: str, default: float) -> float:
        if atom == "":
            return default
        try:
            return int(atom)
        except ValueError:
            return float(atom)

    def match(self, value: float) -> bool:
        """Whether ``value`` satisfies the range; also available as ``in``."""
        inside = self.start <= value <= self.end
        return inside ^ self.invert

    def __contains__(self, value: float) -> bool:
        return self.match(value)

    def _format(self, omit_zero_start: bool = True) -> str:
        parts: list[str] = ["@"] if self.invert else []
        if self.start == -math.inf:
            parts.append("~:")
        elif not omit_zero_start or self.start != 0:
            parts.append(f"{self.start}:")
        if self.end != math.inf:
            parts.append(f"{self.end}")
        return "".join(parts)

    def __str__(self) -> str:
        return self._format()

    def __repr__(self) -> str:
        return f"Range({str(self)!r})"

    def __eq__(self, value: object) -> bool:
        if not isinstance(value, Range):
            return False
        return (
            self.invert == value.invert
            and self.start == value.start
            and self.end == value.end
        )

    @property
    def violation(self) -> str:
        """Why a value does not match."""
        if self.invert:
            return f"inside excluded range {self._format(False)[1:]}"
        return f"outside range {self._format(False)}"


class Metric:
    """One measured quantity of an experiment run.

    :param name: Identifier, also the default name of the assertion that
        judges the metric.
    :param value: A number or a boolean.
    :param uom: Unit of measure, e.g. ``rad`` or ``s``.
    :param assertion: Name of the judging :class:`Assertion` if it differs
        from ``name``.
    """

    name: str
    value: typing.Any
    uom: typing.Optional[str]
    assertion_name: str

    __assertion: typing.Optional[Assertion] = None
    __experiment: typing.Optional[Experiment] = None

    def __init__(
        self,
        name: str,
        value: typing.Any,
        uom: typing.Optional[str] = None,
        assertion: typing.Optional[typing.Union[str, Assertion]] = None,
    ) -> None:
        self.name = name
        self.value = value
        self.uom = uom
        if isinstance(assertion, Assertion):
            self.assertion_name = assertion.name
            self.__assertion = assertion
        else:
            self.assertion_name = assertion or name

    def __str__(self) -> str:
        return self.valueunit

    def __repr__(self) -> str:
        return f"Metric({self.name!r}, {self.value!r})"

    @property
    def experiment(self) -> Experiment:
        if not self.__experiment:
            raise RuntimeError("no experiment set for metric", self.name)
        return self.__experiment

    @experiment.setter
    def experiment(self, experiment: Experiment) -> None:
        self.__experiment = experiment

    @property
    def assertion(self) -> Assertion:
        if not self.__assertion:
            raise RuntimeError("no assertion set for metric", self.name)
        return self.__assertion

    @assertion.setter
    def assertion(self, assertion: Assertion) -> None:
        self.__assertion = assertion

    @property
    def has_assertion(self) -> bool:
        return self.__assertion is not None

    @property
    def description(self) -> str:
        if self.__assertion:
            return self.__assertion.describe(self)
        return str(self)

    @property
    def valueunit(self) -> str:
        """Value with four significant digits for reals, followed by the unit."""
        value = self.value
        if isinstance(value, numbers.Real) and not isinstance(value, numbers.Integral):
            text = "%.4g" % value
        else:
            text = str(value)
        return text + (self.uom or "")

    def evaluate(self) -> Result:
        return self.assertion.evaluate(self, self.experiment)


class Experiment:
    """Base class of everything the harness can run.

    Subclasses do the work in :meth:`probe`, write their artifacts and
    return the metrics the assertions judge.
    """

    @property
    def name(self) -> str:
        return self.__class__.__name__

    def probe(
        self,
    ) -> typing.Union[list[Metric], Metric, typing.Iterator[Metric]]:
        return []


class Result:
    """State of one judged metric plus an explanation."""

    state: VerdictState
    hint: typing.Optional[str]
    metric: typing.Optional[Metric]

    def __init__(
        self,
        state: VerdictState,
        hint: typing.Optional[str] = None,
        metric: typing.Optional[Metric] = None,
    ) -> None:
        self.state = state
        self.hint = hint
        self.metric = metric

    def __str__(self) -> str:
        desc = self.metric.description if self.metric else None
        if self.hint and desc:
            return f"{desc} ({self.hint})"
        return self.hint or desc or ""

    def __repr__(self) -> str:
        return f"Result({self.state!r}, {self.hint!r}, {self.metric!r})"

    def __eq__(self, value: object) -> bool:
        if not isinstance(value, Result):
            return False
        return (
            self.state == value.state
            and self.hint == value.hint
            and self.metric is value.metric
        )


class Results:
    """Judged metrics, accessible by position, by metric name and by state."""

    results: list[Result]
    by_state: dict[VerdictState, list[Result]]
    by_name: dict[str, Result]

    def __init__(self, *results: Result) -> None:
        self.results = []
        self.by_state = collections.defaultdict(list)
        self.by_name = {}
        if results:
            self.add(*results)

    def add(self, *results: Result) -> typing_extensions.Self:
        """:raises ValueError: For anything that is not a :class:`Result`."""
        for result in results:
            if not isinstance(result, Result):  # type: ignore
                raise ValueError("trying to add non-Result to Results container", result)
            self.results.append(result)
            self.by_state[result.state].append(result)
            if result.metric is not None:
                self.by_name[result.metric.name] = result
        return self

    def __iter__(self) -> typing.Iterator[Result]:
        """Worst results first."""
        for state in sorted(self.by_state, key=int, reverse=True):
            yield from self.by_state[state]

    def __len__(self) -> int:
        return len(self.results)

    def __getitem__(self, item: typing.Union[int, str]) -> Result:
        if isinstance(item, int):
            return self.results[item]
        return self.by_name[item]

    def __contains__(self, name: str) -> bool:
        return name in self.by_name

    @property
    def most_significant_state(self) -> VerdictState:
        """:raises ValueError: If there are no results."""
        return max(self.by_state.keys(), key=int)

    @property
    def most_significant(self) -> list[Result]:
        try:
            return self.by_state[self.most_significant_state]
        except ValueError:
            return []

    @property
    def first_significant(self) -> Result:
        return self.most_significant[0]


class Summary:
    """Status line and verbose lines of a run.

    Experiments with a more telling one-line summary subclass it.
    """

    def ok(self, results: Results) -> str:
        return f"{len(results)} assertions hold"

    def problem(self, results: Results) -> str:
        return str(results.first_significant)

    def verbose(self, results: Results) -> list[str]:
        """One line per judged metric, worst first."""
        return [f"{result.state}: {result}" for result in results]

    def empty(self) -> str:
        return "no results"


FmtMetric = typing.Union[str, typing.Callable[[Metric, "Assertion"], str]]


class Assertion:
    """Judges the metrics of one name against the ``expected`` range.

    :param name: Matched against :attr:`Metric.assertion_name`.
    :param expected: Threshold range; :obj:`None` turns the assertion
        into a pure observation that always passes.
    :param fmt_metric: Format string with the fields ``name``, ``value``,
        ``uom`` and ``valueunit``, or a callable.
    """

    name: str
    expected: typing.Optional[Range]
    fmt_metric: FmtMetric

    def __init__(
        self,
        name: str,
        expected: typing.Optional[RangeSpec] = None,
        fmt_metric: FmtMetric = "{name} is {valueunit}",
    ) -> None:
        self.name = name
        self.expected = None if expected is None else Range(expected)
        self.fmt_metric = fmt_metric

    def __repr__(self) -> str:
        return f"Assertion({self.name!r}, {self.expected!r})"

    def evaluate(self, metric: Metric, experiment: Experiment) -> Result:
        if self.expected is None:
            return Result(passed, None, metric)
        value = metric.value
        if isinstance(value, float) and math.isnan(value):
            return Result(failed, "value is NaN", metric)
        if not self.expected.match(value):
            return Result(failed, self.expected.violation, metric)
        return Result(passed, None, metric)

    def describe(self, metric: Metric) -> str:
        if isinstance(self.fmt_metric, str):
            return self.fmt_metric.format(
                name=metric.name,
                value=metric.value,
                uom=metric.uom,
                valueunit=metric.valueunit,
            )
        return self.fmt_metric(metric, self)


class _Assertions:
    by_name: dict[str, Assertion]

    def __init__(self) -> None:
        self.by_name = {}

    def add(self, assertion: Assertion) -> None:
        self.by_name[assertion.name] = assertion

    def __getitem__(self, name: str) -> Assertion:
        # metrics without an assertion are reported, never judged
        return self.by_name.get(name) or Assertion(name)

    def __contains__(self, name: str) -> bool:
        return name in self.by_name

    def __iter__(self) -> typing.Iterator[str]:
        return iter(self.by_name)


class Verdict:
    """Runs experiments and judges their metrics.

    :param objects: Experiments, assertions, a summary or a results
        container, handed to :meth:`add`.
    :param name: Prefix of the status line, the first experiment's name by
        default.
    """

    experiments: list[Experiment]
    assertions: _Assertions
    results: Results
    name: str
    _summary: Summary

    def __init__(
        self,
        *objects: typing.Union[Experiment, Assertion, Summary, Results],
        name: typing.Optional[str] = None,
    ) -> None:
        self.experiments = []
        self.assertions = _Assertions()
        self._summary = Summary()
        self.results = Results()
        self.name = name or ""
        self.add(*objects)

    def add(
        self, *objects: typing.Union[Experiment, Assertion, Summary, Results]
    ) -> typing_extensions.Self:
        """:raises TypeError: For unsupported objects."""
        for obj in objects:
            if isinstance(obj, Experiment):
                self.experiments.append(obj)
                if not self.name:
                    self.name = obj.name
            elif isinstance(obj, Assertion):
                self.assertions.add(obj)
            elif isinstance(obj, Summary):
                self._summary = obj
            elif isinstance(obj, Results):
                self.results = obj
            else:
                raise TypeError(f"cannot add type {type(obj)} to a verdict", obj)
        return self

    def _evaluate_experiment(self, experiment: Experiment) -> None:
        metric = None
        try:
            metrics = experiment.probe()
            if isinstance(metrics, Metric):
                metrics = [metrics]
            produced = 0
            for metric in metrics:
                produced += 1
                if metric.assertion_name in self.assertions or not metric.has_assertion:
                    metric.assertion = self.assertions[metric.assertion_name]
                metric.experiment = experiment
                self.results.add(metric.evaluate())
            if not produced:
                log.warning("experiment %s did not produce any metric", experiment.name)
        except DktvError as e:
            log.error("%s: %s", experiment.name, e)
            self.results.add(Result(error, str(e), metric))

    def __call__(self) -> None:
        for experiment in self.experiments:
            self._evaluate_experiment(experiment)

    def main(self, verbose: typing.Any = None, colorize: bool = False) -> typing.NoReturn:
        """Run, print the report and exit with :attr:`exitcode`."""
        _Runtime().execute(self, verbose=verbose, colorize=colorize)

    @property
    def state(self) -> VerdictState:
        """Worst result state, :obj:`error` without results."""
        try:
            return self.results.most_significant_state
        except ValueError:
            return error

    @property
    def summary(self) -> str:
        if not self.results:
            return self._summary.empty()
        if self.state == passed:
            return self._summary.ok(self.results)
        return self._summary.problem(self.results)

    @property
    def verbose(self) -> list[str]:
        return self._summary.verbose(self.results)

    @property
    def exitcode(self) -> int:
        return int(self.state)


class _Output:
    logchan: logging.StreamHandler[io.StringIO]
    verbose: int
    status: str
    out: list[str]

    def __init__(self, logchan: logging.StreamHandler[io.StringIO], verbose: int = 0) -> None:
        self.logchan = logchan
        self.verbose = verbose
        self.status = ""
        self.out = []

    def add(self, verdict: Verdict) -> None:
        self.status = self.format_status(verdict)
        if self.verbose > 0:
            self.add_longoutput(verdict.verbose)

    @staticmethod
    def format_status(verdict: Verdict) -> str:
        name = f"DKTV {verdict.name.upper()} " if verdict.name else "DKTV "
        summary = verdict.summary.strip()
        return f"{name}{str(verdict.state).upper()}" + (f" - {summary}" if summary else "")

    def add_longoutput(self, text: typing.Union[str, typing.Sequence[str]]) -> None:
        if isinstance(text, str):
            self.out.append(text.rstrip("\n"))
        else:
            for line in text:
                self.add_longoutput(line)

    def __str__(self) -> str:
        lines = [self.status, *self.out, self.logchan.stream.getvalue().rstrip("\n")]
        return "\n".join(line for line in lines if line) + "\n"


P = typing.ParamSpec("P")
R = typing.TypeVar("R")


def guarded(
    original_function: typing.Any = None, verbose: typing.Any = None
) -> typing.Any:
    """Run the decorated ``main`` under the harness runtime.

    Uncaught exceptions end the program with a one-line ``ERROR`` status,
    a traceback when verbose, and exit code ``2``.

    :param verbose: Verbosity before :meth:`Verdict.main` sets it, e.g.
        ``@guarded(verbose=0)`` suppresses early tracebacks.
    """

    def _decorate(func: typing.Callable[P, R]) -> typing.Callable[P, R]:
        @functools.wraps(func)
        def wrapper(*args: P.args, **kwds: P.kwargs) -> R:
            runtime = _Runtime()
            if verbose is not None:
                runtime.verbose = verbose
            try:
                return func(*args, **kwds)
            except SystemExit:
                raise
            except Exception:
                runtime._handle_exception()

        return wrapper

    if original_function is not None:
        assert callable(original_function), (
            f'Function {original_function!r} not callable. Forgot to add "verbose=" keyword?'
        )
        return _decorate(original_function)
    return _decorate


class _Runtime:
    """Process-wide singleton owning the log capture, the output and the exit code."""

    instance: typing.Optional[_Runtime] = None
    verdict: typing.Optional[Verdict] = None
    _verbose = 1
    _colorize: bool = False
    _initialized: bool = False
    logchan: logging.StreamHandler[io.StringIO]
    output: _Output
    stdout: typing.Optional[io.StringIO] = None
    exitcode: int = 2

    def __new__(cls) -> typing_extensions.Self:
        if not cls.instance:
            cls.instance = super().__new__(cls)
        return cls.instance  # type: ignore[return-value]

    def __init__(self) -> None:
        if self._initialized:
            return
        self._initialized = True
        rootlogger = logging.getLogger("dktv")
        rootlogger.setLevel(logging.DEBUG)
        self.logchan = logging.StreamHandler(io.StringIO())
        self.logchan.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        self.logchan.setLevel(logging.WARNING)
        rootlogger.addHandler(self.logchan)
        self.output = _Output(self.logchan)

    @classmethod
    def reset(cls) -> None:
        """Forget the singleton and detach its log handler."""
        if cls.instance is not None and cls.instance._initialized:
            logging.getLogger("dktv").removeHandler(cls.instance.logchan)
        cls.instance = None

    def _handle_exception(self, statusline: typing.Optional[str] = None) -> typing.NoReturn:
        exc_type, value = sys.exc_info()[0:2]
        name = f"DKTV {self.verdict.name.upper()} " if self.verdict and self.verdict.name else "DKTV "
        self.output.status = "{0}ERROR - {1}".format(
            name,
            statusline or traceback.format_exception_only(exc_type, value)[0].strip(),
        )
        if self.verbose > 0:
            self.output.add_longoutput(traceback.format_exc())
        print(f"{self.output}", end="", file=self.stdout)
        self.exitcode = int(error)
        self.sysexit()

    @property
    def verbose(self) -> int:
        return self._verbose

    @verbose.setter
    def verbose(self, verbose: typing.Any) -> None:
        if isinstance(verbose, (int, float)):
            self._verbose = int(verbose)
        else:
            self._verbose = len(verbose or [])
        if self._verbose >= 3:
            self.logchan.setLevel(logging.DEBUG)
            self._verbose = 3
        elif self._verbose == 2:
            self.logchan.setLevel(logging.INFO)
        else:
            self.logchan.setLevel(logging.WARNING)
        self.output.verbose = self._verbose

    @property
    def colorize(self) -> bool:
        return self._colorize

    @colorize.setter
    def colorize(self, colorize: bool) -> None:
        self._colorize = colorize
        fmt = "%(levelname)s %(name)s: %(message)s"
        self.logchan.setFormatter(
            self._AnsiColorFormatter(fmt) if colorize else logging.Formatter(fmt)
        )

    def run(self, verdict: Verdict) -> None:
        verdict()
        self.output.add(verdict)
        self.exitcode = verdict.exitcode

    def execute(
        self, verdict: Verdict, verbose: typing.Any = None, colorize: bool = False
    ) -> typing.NoReturn:
        self.verdict = verdict
        if verbose is not None:
            self.verbose = verbose
        if colorize:
            self.colorize = True
        self.run(verdict)
        print(f"{self.output}", end="", file=self.stdout)
        self.sysexit()

    def sysexit(self) -> typing.NoReturn:
        sys.exit(self.exitcode)

    class _AnsiColorFormatter(logging.Formatter):
        def format(self, record: logging.LogRecord) -> str:
            reset = "\033[0m"
            start = {
                "DEBUG": "\033[90m",
                "INFO": "\033[34m",
                "WARNING": "\033[93m",
                "ERROR": "\033[31m",
                "CRITICAL": "\033[91m",
            }.get(record.levelname, reset)
            return f"{start}{super().format(record)}{reset}"
