import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from jscn.graph import BipartiteDomain


def random_bipartite(rng, n_users, n_items, density=0.35):
    """Random domain; isolated vertices get one random edge each."""
    r = rng.random((n_users, n_items)) < density
    for u in np.flatnonzero(~r.any(axis=1)):
        r[u, rng.integers(n_items)] = True
    for i in np.flatnonzero(~r.any(axis=0)):
        r[rng.integers(n_users), i] = True
    return BipartiteDomain([f"u{k}" for k in range(n_users)], [f"i{k}" for k in range(n_items)], np.argwhere(r))


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    # bit-reproducibility depends on a fixed BLAS thread count
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary lines -------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
