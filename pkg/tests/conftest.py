import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from riskcouple.sde import ModelSpec, PolicySpec, TimeGrid  # noqa: E402

ACCEPTANCE = {}


@pytest.fixture
def ou():
    return ModelSpec(1, lambda t, x, u: -x + u, 1.0)


@pytest.fixture
def zero_policy():
    return PolicySpec.affine(0.0, 0.0)


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 0.01, 100)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:<5} {'PASS' if ok else 'FAIL'}  {line}")
