import numpy as np
import pytest

_acceptance_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance_results[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report._acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_results):
        title, outcome = _acceptance_results[number]
        terminalreporter.write_line(f"[{outcome}] criterion {number}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
