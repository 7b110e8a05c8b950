import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for the acceptance summary, then assert."""
    def check(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
