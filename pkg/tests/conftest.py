import numpy as np
import pytest

from qsmfg.model import Mechanical, ScaledSeparable
from qsmfg.torus import GridMeasure, TorusGrid
from qsmfg.weakkam import WeakKam


@pytest.fixture(scope="session")
def grid64():
    return TorusGrid(1, 64)


@pytest.fixture(scope="session")
def uniform64(grid64):
    return GridMeasure.uniform(grid64)


@pytest.fixture(scope="session")
def mechanical():
    return Mechanical()


@pytest.fixture(scope="session")
def scaled():
    return ScaledSeparable()


@pytest.fixture(scope="session")
def wk64(mechanical, grid64):
    return WeakKam(mechanical, grid64)


@pytest.fixture(scope="session")
def barrier64(wk64, uniform64):
    return wk64.peierls_barrier(0, uniform64, 0.0)


def maupertuis_barrier(y):
    """Closed-form barrier from 0 for the builtin mechanical model at the uniform measure."""
    y = np.asarray(y, dtype=float)
    return (2.0 / np.pi) * np.minimum(1.0 - np.cos(np.pi * y), 1.0 + np.cos(np.pi * y))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
