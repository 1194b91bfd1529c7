"""Command line interface: ``dktv <experiment> [options]``.

Every run prints one status line ``DKTV <EXPERIMENT> PASSED|FAILED|ERROR``
followed by the judged metrics and exits with ``0`` (all assertions
hold), ``1`` (an assertion failed) or ``2`` (the run could not complete,
including invalid command lines and configurations).
"""

from __future__ import annotations

import json
import sys
import typing
from argparse import ArgumentParser, Namespace, RawDescriptionHelpFormatter
from collections.abc import Iterator, Sequence
from pathlib import Path

from dktv import __version__
from dktv.config import EXPERIMENTS, load_config, parse_duration
from dktv.experiments import ExperimentSummary, create_experiment
from dktv.verdict import Verdict, guarded


class MultiArg:
    """Comma separated option values.

    .. code-block:: python

        parser.add_argument("--seed", type=MultiArg, default="")
    """

    args: list[str]

    def __init__(self, args: typing.Union[list[str], str], splitchar: str = ",") -> None:
        if isinstance(args, list):
            self.args = args
        else:
            self.args = [a for a in args.split(splitchar) if a]

    def __len__(self) -> int:
        return len(self.args)

    def __iter__(self) -> Iterator[str]:
        return iter(self.args)


class _ArgumentParser(ArgumentParser):
    """Usage errors exit with ``2`` like every other failed run.

    ``--help`` and ``--version`` still exit with ``0``.
    """

    def exit(self, status: int = 0, message: typing.Optional[str] = None) -> typing.NoReturn:
        if message:
            self._print_message(message, sys.stderr)
        sys.exit(status)


def setup_argparser() -> ArgumentParser:
    parser = _ArgumentParser(
        prog="dktv",
        formatter_class=lambda prog: RawDescriptionHelpFormatter(prog, width=80),
        description=f"version {__version__}\n\n"
        "Deep Koopman learning of time-varying systems. Runs one experiment,\n"
        "writes its tables into OUT/EXPERIMENT/ and judges the results.",
    )
    parser.add_argument("-V", "--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument(
        "-c",
        "--config",
        metavar="FILE",
        help="JSON configuration, the built-in defaults of the experiment otherwise",
    )
    parser.add_argument(
        "-s",
        "--seed",
        metavar="SEED[,SEED,...]",
        type=MultiArg,
        default=MultiArg(""),
        help="Replace the seeds of the configuration.",
    )
    parser.add_argument("-o", "--out", metavar="DIR", help="Root directory of the run output.")
    parser.add_argument(
        "-d",
        "--duration",
        metavar="DURATION",
        type=parse_duration,
        help="Simulated time, e.g. 20, 75s or 2min.",
    )
    parser.add_argument("--plots", action="store_true", default=None, help="Also write SVG figures.")
    parser.add_argument(
        "-j", "--jobs", type=int, metavar="N", help="Worker threads for independent replicas."
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a configuration value, e.g. --set train.epochs=50.",
    )
    parser.add_argument(
        "--write-oracle",
        action="store_true",
        help="Train oracle_epochs_factor times longer and record the reference errors instead of judging against them.",
    )
    parser.add_argument("--color", action="store_true", help="Colorize the log output.")
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Increase the output verbosity, up to three times (-vvv): "
        "1 (-v): list every metric; "
        "2 (-vv): also log.info; "
        "3 (-vvv): also log.debug",
    )
    return parser


def _overrides(args: Namespace) -> list[str]:
    overrides = list(args.overrides)
    if len(args.seed):
        overrides.append(f"seeds=[{','.join(args.seed)}]")
    if args.out is not None:
        overrides.append(f"out={json.dumps(Path(args.out).as_posix())}")
    if args.duration is not None:
        overrides.append(f"duration={args.duration!r}")
    if args.plots:
        overrides.append("plots=true")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    return overrides


@guarded(verbose=0)
def main(argv: typing.Optional[Sequence[str]] = None) -> None:
    args = setup_argparser().parse_args(argv)
    config = load_config(args.config, _overrides(args), experiment=args.experiment)
    experiment = create_experiment(config, write_oracle=args.write_oracle)
    verdict = Verdict(experiment, *experiment.assertions(), ExperimentSummary())
    verdict.main(verbose=args.verbose, colorize=args.color)


if __name__ == "__main__":
    main()
