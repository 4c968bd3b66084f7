import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one PASS/FAIL line each at the end of the run
_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.fixture
def detail(request):
    """Append a measured value to the criterion's summary line."""
    notes = []
    request.node.acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    ok = _acceptance.get(number, (True,))[0] and report.passed
    _acceptance[number] = (ok, title, "; ".join(getattr(item, "acceptance_notes", [])))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        ok, title, notes = _acceptance[number]
        line = f"{'PASS' if ok else 'FAIL'} {number:2d}. {title}"
        terminalreporter.write_line(line + (f" ({notes})" if notes else ""))
