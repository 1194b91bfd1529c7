import io
import sys
import typing
from contextlib import redirect_stderr, redirect_stdout
from unittest import mock

import numpy as np
import pytest

from dktv.regression import fit_batch
from dktv.testing import central_difference, random_lifted_data
from dktv.testing import MockResult
from dktv.verdict import failed


def test_mock_result() -> typing.NoReturn:
    file_stdout = io.StringIO()
    file_stderr = io.StringIO()

    with (
        mock.patch("sys.exit") as sys_exit,
        redirect_stdout(file_stdout),
        redirect_stderr(file_stderr),
    ):
        print("DKTV NH-SWEEP FAILED - error_decreases is False")
        sys.exit(1)
        result = MockResult(sys_exit, file_stdout, file_stderr)

        assert result.first_line == "DKTV NH-SWEEP FAILED - error_decreases is False"
        assert result.exitcode == 1
        assert result.state == failed
        assert result.stderr is None


def test_central_difference_of_quadratic() -> None:
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -1.2])
    grad = central_difference(lambda v: float(v @ Q @ v), x)
    np.testing.assert_allclose(grad, 2.0 * Q @ x, atol=1e-8)


def test_random_lifted_data_is_exactly_linear() -> None:
    rng = np.random.default_rng(0)
    data = random_lifted_data(rng, r=4, m=1, n=2, beta=12)
    assert data.G.shape == (4, 12)
    assert data.U.shape == (1, 12)
    matrices = fit_batch(data.G, data.G_bar, data.U, data.X)
    residual = data.G_bar - matrices.A @ data.G - matrices.B @ data.U
    assert float(np.max(np.abs(residual))) == pytest.approx(0.0, abs=1e-10)
    assert float(np.max(np.abs(np.linalg.eigvals(matrices.A)))) == pytest.approx(0.9)
