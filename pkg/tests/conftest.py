import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from pam_ageing.analytics import PRESETS  # noqa: E402


@pytest.fixture(params=["d1", "d2"])
def preset(request):
    return PRESETS[request.param]


@pytest.fixture
def d1():
    return PRESETS["d1"]


@pytest.fixture
def d2():
    return PRESETS["d2"]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
