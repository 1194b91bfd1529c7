"""Helpers for testing dktv: captured command line runs and numeric oracles."""

from __future__ import annotations

import io
import typing
from collections.abc import Callable, Sequence
from contextlib import redirect_stderr, redirect_stdout
from unittest import mock

import numpy as np

from dktv.verdict import VerdictState, _Runtime


class MockResult:
    """Exit code and output of a command line run with a mocked :func:`sys.exit`."""

    __sys_exit: mock.Mock
    __stdout: typing.Optional[str] = None
    __stderr: typing.Optional[str] = None

    def __init__(
        self,
        sys_exit_mock: mock.Mock,
        stdout: typing.Optional[io.StringIO],
        stderr: typing.Optional[io.StringIO],
    ) -> None:
        self.__sys_exit = sys_exit_mock
        if stdout is not None and stdout.getvalue():
            self.__stdout = stdout.getvalue()
        if stderr is not None and stderr.getvalue():
            self.__stderr = stderr.getvalue()

    @property
    def exitcode(self) -> int:
        """The exit code of the first :func:`sys.exit` call."""
        return int(self.__sys_exit.call_args_list[0][0][0])

    @property
    def state(self) -> VerdictState:
        return VerdictState.state(self.exitcode)

    @property
    def stdout(self) -> typing.Optional[str]:
        return self.__stdout

    @property
    def stderr(self) -> typing.Optional[str]:
        return self.__stderr

    @property
    def output(self) -> str:
        return (self.__stderr or "") + (self.__stdout or "")

    @property
    def first_line(self) -> typing.Optional[str]:
        """The first output line without its line break."""
        if self.output:
            return self.output.split("\n", 1)[0]
        return None


class _Exit(SystemExit):
    pass


def run_cli(argv: Sequence[str]) -> MockResult:
    """Run ``dktv argv…`` in-process with a fresh runtime.

    :func:`sys.exit` is mocked to stop the run at its first call, so the
    result always carries the exit code the command line would return.
    """
    from dktv.cli import main

    _Runtime.reset()
    stdout, stderr = io.StringIO(), io.StringIO()
    with (
        mock.patch("sys.exit", side_effect=_Exit) as sys_exit,
        redirect_stdout(stdout),
        redirect_stderr(stderr),
    ):
        try:
            main(list(argv))
        except _Exit:
            pass
    _Runtime.reset()
    return MockResult(sys_exit, stdout, stderr)


def central_difference(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Gradient of the scalar ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


class LiftedData(typing.NamedTuple):
    G: np.ndarray
    G_bar: np.ndarray
    U: np.ndarray
    X: np.ndarray


def random_lifted_data(
    rng: np.random.Generator, r: int, m: int, n: int, beta: int, noise: float = 0.0
) -> LiftedData:
    """Lifted snapshots of a random stable linear system in ``ℝʳ``.

    ``X = C_true·G`` with a random ``n×r`` projection, so a noise-free fit
    recovers the system exactly.
    """
    A = rng.standard_normal((r, r))
    A *= 0.9 / max(1e-12, float(np.max(np.abs(np.linalg.eigvals(A)))))
    B = rng.standard_normal((r, m))
    C = rng.standard_normal((n, r))
    G = rng.standard_normal((r, beta))
    U = rng.standard_normal((m, beta))
    G_bar = A @ G + B @ U + noise * rng.standard_normal((r, beta))
    return LiftedData(G, G_bar, U, C @ G)
