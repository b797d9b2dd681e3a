import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ehiot.geometry import Deployment
from ehiot.model import SimConfig

settings.register_profile("ehiot", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ehiot")


@pytest.fixture
def small_cfg():
    return SimConfig(n_devices=20, horizon=300, replications=3, seed=7)


def fixed_deployment(points, side=20.0):
    return Deployment(np.asarray(points, dtype=float), side)


# criterion number -> list of (passed, message) parts, filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[num]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {num:>2}: {status}  " + " | ".join(m for _, m in parts))
