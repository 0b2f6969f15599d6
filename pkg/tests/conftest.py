import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from redinv.forward_pde import Mesh, elliptic_testbed, h1_space, sample_training_set

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def oracle():
    return json.loads((Path(__file__).parent / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def small_model():
    return elliptic_testbed(n_h=63, d=2)


@pytest.fixture(scope="session")
def small_train(small_model):
    return sample_training_set(small_model, 9)


@pytest.fixture(scope="session")
def space63():
    return h1_space(63)


@pytest.fixture(scope="session")
def mesh63():
    return Mesh(63)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(k, checks):
        ok = all(v for _, v in checks)
        failed = [name for name, v in checks if not v]
        line = f"acceptance {k}: {'PASS' if ok else 'FAIL'}" + (f" ({', '.join(failed)})" if failed else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
