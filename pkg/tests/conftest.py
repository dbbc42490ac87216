"""Shared pytest wiring: the verification-criterion marker and its summary.

Tests marked @pytest.mark.criterion(num, description) are collected into a
registry; at the end of the session one `criterion N [PASS|FAIL] ...` line
is printed per criterion so the harness verdict is readable at a glance.
"""

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, description): a verification-harness acceptance check",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, desc = marker.args
    if report.when == "setup" and report.failed:
        _RESULTS[num] = ("FAIL", desc)
    elif report.when == "call":
        _RESULTS[num] = ("PASS" if report.passed else "FAIL", desc)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("verification criteria")
    for num in sorted(_RESULTS):
        status, desc = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d} [{status}] {desc}")
