import numpy as np
import pytest

from mmnlvb.model import AgentData, ChoiceDataset, Hyperpriors, initial_global
from mmnlvb.data_io import SimSpec, simulate_dataset


def random_agent(rng, T, J, K, agent_id=0, scale=1.0):
    X = scale * rng.standard_normal((T, J, K))
    y = rng.integers(0, J, size=T)
    return AgentData(agent_id, X, y)


def random_global(rng, H, priors):
    g = initial_global(H, priors)
    K = priors.K
    M = rng.standard_normal((K, K))
    g.mu_zeta = rng.standard_normal(K)
    g.Upsilon = g.omega * (M @ M.T / K + 0.5 * np.eye(K))
    g.__post_init__()
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    spec = SimSpec(H=50, J=4, K=3, T=8, Omega_true=0.25 * np.eye(3), seed=7)
    return simulate_dataset(spec)


@pytest.fixture
def priors3():
    return Hyperpriors.default(3)


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
