"""Shared fixtures: small trajectories reused across modules."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from atwflow.grid import Disk, GridSpec, synth_shape
from atwflow.oracles import BallOracle
from atwflow.scheme import run_scheme
from atwflow.tv import SolverParams

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_R0 = 0.6


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec.cube(64, 1.6)


@pytest.fixture(scope="session")
def small_ball(small_grid):
    """Disk of radius 0.6 on a 64^2 grid, h = dx, run to extinction."""
    h = small_grid.spacing
    E0 = synth_shape(small_grid, Disk(SMALL_R0))
    return run_scheme(E0, h, SolverParams(), 100)


@pytest.fixture(scope="session")
def small_ball_aniso(small_grid):
    h = small_grid.spacing
    E0 = synth_shape(small_grid, Disk(SMALL_R0))
    return run_scheme(E0, h, SolverParams(tv_mode="anisotropic"), 100)


@pytest.fixture(scope="session")
def small_oracle(small_grid):
    return BallOracle(SMALL_R0, 2, small_grid.spacing)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance summary ---------------------------------------------------------------

ACCEPTANCE_ROWS = 12
_acceptance: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """``record(row, passed, detail)`` stores one acceptance verdict and prints it."""
    def _record(row: int, passed: bool, detail: str) -> bool:
        _acceptance[row] = (bool(passed), detail)
        print(f"ROW {row:2d} {'PASS' if passed else 'FAIL'}: {detail}")
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for row in range(1, ACCEPTANCE_ROWS + 1):
        passed, detail = _acceptance.get(row, (False, "not evaluated"))
        terminalreporter.write_line(f"ROW {row:2d} {'PASS' if passed else 'FAIL'}: {detail}")
