import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# -- acceptance report ---------------------------------------------------------------
_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(item.user_properties).get("detail", "")
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA.append((marker.args[0], marker.args[1], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_CRITERIA):
        line = f"{status} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} -- {detail}" if detail else line)
