import numpy as np
import pytest

from geoftscp.changepoint import NullSettings
from geoftscp.core import FunctionalDataset, SpatialDomain, uniform_grid

# smallest null sample the library accepts; keeps report tests fast
FAST_NULLS = NullSettings(replicates=10_000, grid_size=200, ff_replicates=10_000, ff_grid_size=200)


def random_dataset(rng, n=6, N=8, m=10, kind="plane"):
    if kind == "plane":
        coords = rng.uniform(0, 1, size=(n, 2))
    else:
        coords = np.column_stack([rng.uniform(-180, 180, n), rng.uniform(-80, 80, n)])
    return FunctionalDataset(SpatialDomain(kind, coords), rng.normal(size=(n, N, m)), uniform_grid(m))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fast_nulls():
    return FAST_NULLS


# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
