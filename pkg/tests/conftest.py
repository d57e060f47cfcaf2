import sys, os
sys.path.insert(0, os.path.dirname(__file__))
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("spen", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("spen")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
