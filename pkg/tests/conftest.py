import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def task():
    from aqkit.harness import ReachTask
    return ReachTask()


@pytest.fixture(scope="session")
def trained(task):
    """One trained toy policy shared by the harness, cli and scaleopt tests."""
    from aqkit.harness import train_policy
    return train_policy(task, seed=0)


@pytest.fixture(scope="session")
def calib(trained, task):
    from aqkit.harness.pipeline import gen_calibration
    return gen_calibration(trained, task, 60, 42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_POLICIES = {}


@pytest.fixture(scope="session")
def policy_for_seed(task):
    """Trained policies keyed by training seed, cached for the whole session."""
    from aqkit.harness import train_policy

    def get(seed):
        if seed not in _POLICIES:
            _POLICIES[seed] = train_policy(task, seed=seed)
        return _POLICIES[seed]
    return get


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
