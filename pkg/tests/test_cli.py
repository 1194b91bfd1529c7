import argparse
import json
from pathlib import Path

import pytest

from dktv import __version__
from dktv.cli import MultiArg, _overrides, setup_argparser
from dktv.testing import run_cli
from dktv.verdict import error, failed, passed

SMALL = [
    "--set", "gammas=[0.8]",
    "--set", "train.epochs=1",
    "--set", "net.hidden=[8]",
    "--set", "net.output_dim=4",
    "--set", "net.hidden_activation=gaussian",
    "--set", "net.output_activation=gaussian",
]  # fmt: skip


class TestMultiarg:
    def test_len(self) -> None:
        assert 2 == len(MultiArg(["a", "b"]))

    def test_iter(self) -> None:
        assert ["a", "b"] == list(MultiArg(["a", "b"]))

    def test_split(self) -> None:
        assert ["0", "1", "2"] == list(MultiArg("0,1,2"))

    def test_empty_string(self) -> None:
        assert 0 == len(MultiArg(""))

    def test_other_separator(self) -> None:
        assert ["1", "2"] == list(MultiArg("1;2", splitchar=";"))


class TestSetupArgparser:
    def test_basic_creation(self) -> None:
        parser = setup_argparser()
        assert isinstance(parser, argparse.ArgumentParser)
        assert parser.prog == "dktv"

    def test_version_in_description(self) -> None:
        parser = setup_argparser()
        assert parser.description
        assert f"version {__version__}" in parser.description

    def test_options_become_overrides(self) -> None:
        args = setup_argparser().parse_args(
            ["mpc-cartpole", "-s", "3,4", "-o", "out dir", "-d", "2min", "--plots", "-j", "2"]
        )
        assert _overrides(args) == [
            "seeds=[3,4]",
            'out="out dir"',
            "duration=120.0",
            "plots=true",
            "jobs=2",
        ]

    def test_set_options_come_first(self) -> None:
        args = setup_argparser().parse_args(["nh-sweep", "--set", "beta=12", "-s", "1"])
        assert _overrides(args) == ["beta=12", "seeds=[1]"]

    def test_verbosity_counts(self) -> None:
        assert setup_argparser().parse_args(["bound-report", "-vvv"]).verbose == 3


class TestMain:
    def test_help(self) -> None:
        result = run_cli(["--help"])
        assert result.exitcode == 0
        assert result.stdout is not None
        assert result.stdout.startswith("usage: dktv")

    def test_version(self) -> None:
        result = run_cli(["--version"])
        assert result.exitcode == 0
        assert result.output.strip() == f"dktv {__version__}"

    def test_unknown_experiment(self) -> None:
        result = run_cli(["pendulum"])
        assert result.exitcode == 2
        assert "invalid choice" in result.output

    def test_missing_config_file(self, tmp_path: Path) -> None:
        result = run_cli(["simple-ntvs", "-c", str(tmp_path / "missing.json")])
        assert result.state == error
        assert result.first_line is not None
        assert result.first_line.startswith("DKTV ERROR - ")
        assert "does not exist" in result.first_line

    def test_invalid_override(self) -> None:
        result = run_cli(["simple-ntvs", "--set", "beta=2"])
        assert result.exitcode == 2
        assert "r+m = 6" in result.output

    def test_missing_snapshots(self, tmp_path: Path) -> None:
        result = run_cli(["bound-report", "-o", str(tmp_path)])
        assert result.exitcode == 2
        assert result.first_line is not None
        assert result.first_line.startswith("DKTV BOUND-REPORT ERROR - no snapshots in")

    def test_run_passes_and_writes_outputs(self, tmp_path: Path) -> None:
        result = run_cli(["simple-ntvs", "-o", str(tmp_path), "-s", "0", "-d", "3", *SMALL])
        assert result.state == passed, result.output
        assert result.first_line is not None
        assert result.first_line.startswith("DKTV SIMPLE-NTVS PASSED")
        out = tmp_path / "simple-ntvs"
        assert (out / "errors_gamma0.8.csv").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [0]
        assert manifest["config"]["duration"] == 3.0

    def test_threshold_override_fails_the_run(self, tmp_path: Path) -> None:
        result = run_cli(
            [
                "simple-ntvs",
                "-o",
                str(tmp_path),
                "-s",
                "0",
                "-d",
                "3",
                *SMALL,
                "--set",
                'thresholds={"diverged_batches_gamma0.8": "1:"}',
                "-v",
            ]
        )
        assert result.state == failed
        assert result.first_line is not None
        assert "diverged_batches_gamma0.8 is 0 (outside range 1:)" in result.first_line


@pytest.mark.parametrize("argv", [["-V"], ["--help"]])
def test_informational_options_exit_cleanly(argv: list[str]) -> None:
    assert run_cli(argv).exitcode == 0
