import numpy as np
import pytest

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.addinivalue_line("markers", "slow: runs a full simulation")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = CRITERIA.setdefault(number, {"title": title, "passed": True, "tests": 0})
    if rep.when == "call" or rep.failed:
        if rep.when == "call":
            entry["tests"] += 1
        if rep.failed or rep.skipped:
            entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        e = CRITERIA[number]
        status = "PASS" if e["passed"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:2d}: {e['title']} ({e['tests']} tests)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
