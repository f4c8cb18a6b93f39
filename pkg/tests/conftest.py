import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ptrack.scenarios import build_tc1, build_tc2

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tc1_desk():
    """Desk-scale heterogeneous TC1 (300 x 60, sigma2 = 2.5)."""
    return build_tc1(sigma2=2.5, n_particles=1000, seed=7, scale=0.2)


@pytest.fixture(scope="session")
def tc1_uniform_small():
    return build_tc1(sigma2=0.0, n_particles=50, seed=0, scale=0.1)


@pytest.fixture(scope="session")
def tc2_base():
    return build_tc2(n_particles=1000, ts_count=5, refine=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
