"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import pytest

_TITLES = {}
_FAILED = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (report.when == "call" or report.failed):
        return
    number, title = marker.args
    _TITLES[number] = title
    _FAILED[number] = _FAILED.get(number, False) or report.failed


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        verdict = "FAIL" if _FAILED[number] else "PASS"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {_TITLES[number]}")
