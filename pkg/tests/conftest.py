import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crossed_eb.model import Dataset, Priors, VarianceComponents
from crossed_eb.simulate import random_instance

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_spd(rng, q, jitter=0.2):
    G = rng.standard_normal((q, q))
    return G @ G.T / q + jitter * np.eye(q)


def random_vc(rng, q_u, q_v):
    return VarianceComponents(rng.uniform(0.3, 2.0), random_spd(rng, q_u), random_spd(rng, q_v))


def random_priors(rng, p):
    return Priors(rng.standard_normal(p), random_spd(rng, p, 0.5))


def tiny_dataset(rng, m=3, t=2, p=1, qu=1, qv=1, n=2):
    user = np.repeat(np.arange(m), t * n)
    time = np.tile(np.repeat(np.arange(t), n), m)
    N = len(user)
    return Dataset(user, time, rng.standard_normal((N, p)), rng.standard_normal((N, qu)),
                   rng.standard_normal((N, qv)), rng.standard_normal(N), m, t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def instance():
    return random_instance(3, m_max=5, t_max=4)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request, capsys):
    """report(name, ok, detail): print a PASS/FAIL line now and in the summary."""

    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return _report
