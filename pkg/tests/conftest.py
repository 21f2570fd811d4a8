import numpy as np
import pytest

from simred.models import enzyme_system, vr_system

# Acceptance lines collected by tests/test_acceptance.py and echoed in the
# terminal summary so they survive output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["enzyme", "vr"])
def system(request):
    return enzyme_system(1e-2) if request.param == "enzyme" else vr_system(0.2)
