"""Per-criterion pass/fail summary for the acceptance suite.

Acceptance tests carry ``@pytest.mark.criterion(number, title)``.  A
criterion passes only when every test carrying its number passes; the
summary prints one line per criterion at the end of the run.
"""

from collections import defaultdict

import pytest

_results = defaultdict(list)
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    _titles[number] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results[number].append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        outcomes = _results[number]
        passed = sum(o == "passed" for _, o in outcomes)
        status = "PASS" if passed == len(outcomes) else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:2d}: {status}  ({passed}/{len(outcomes)} checks)  {_titles[number]}"
        )
