import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria outcomes, reported once at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


class Criterion:
    def __init__(self, number):
        self.number = number

    def check(self, ok, detail):
        CRITERIA[self.number] = (bool(ok), detail)
        assert ok, f"criterion {self.number}: {detail}"


@pytest.fixture
def criterion(request):
    number = int(request.node.name.split("_")[2])
    yield Criterion(number)
    if number not in CRITERIA:
        CRITERIA[number] = (False, "errored before reaching its check")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
