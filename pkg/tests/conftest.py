import numpy as np
import pytest

from bsplit.collision import CollisionEngine
from bsplit.core import PhysParams, VelocityGrid

# One line per acceptance criterion, filled by test_acceptance.py and printed
# in the terminal summary.
ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def small_grid():
    # smallest lattice whose linear collision operator is dissipative at R = 6
    return VelocityGrid(6.0, 12)


@pytest.fixture(scope="session")
def small_engine(small_grid):
    return CollisionEngine(PhysParams(), small_grid)


@pytest.fixture(scope="session")
def grid16():
    return VelocityGrid(6.0, 16)


@pytest.fixture(scope="session")
def engine16(grid16):
    return CollisionEngine(PhysParams(), grid16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
