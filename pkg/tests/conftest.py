import math
import sys
import time

import numpy as np
import pytest

from mfpca.core import DiscretizedOperator, GridFunction, uniform_grid
from mfpca.simulate import example1, fourier_basis, run_monte_carlo, sim3src


def fourier(nu, grid):
    return GridFunction(grid, fourier_basis(nu, grid.points))


def rank_one(values, grid):
    v = np.asarray(values, dtype=float)
    return DiscretizedOperator(grid, np.outer(v, v))


def projector(grid, *functions):
    """Projector onto orthonormal functions given as value arrays."""
    phi = np.stack([np.asarray(f, dtype=float) for f in functions])
    return DiscretizedOperator(grid, phi.T @ phi)


def half(a, b, grid):
    return (fourier_basis(a, grid.points) + fourier_basis(b, grid.points)) / math.sqrt(2)


@pytest.fixture(scope="session")
def grid501():
    return uniform_grid(501)


@pytest.fixture(scope="session")
def grid101():
    return uniform_grid(101)


# Monte Carlo runs shared by the acceptance suite and the simulate invariants.
# They are computed at most once per session; ``elapsed`` records wall time.


def _timed(config, M):
    start = time.perf_counter()
    table = run_monte_carlo(config, M)
    table.elapsed = time.perf_counter() - start
    return table


@pytest.fixture(scope="session")
def table_100_400_400():
    return _timed(sim3src(n=(100, 400, 400), N=50, seed=0), 100)


@pytest.fixture(scope="session")
def table_50_200_200_sparse():
    return _timed(sim3src(n=(50, 200, 200), N=10, seed=0), 100)


@pytest.fixture(scope="session")
def table_50_200_200_dense():
    return _timed(sim3src(n=(50, 200, 200), N=50, seed=0), 100)


@pytest.fixture(scope="session")
def table_example1():
    return _timed(example1(seed=0), 100)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
