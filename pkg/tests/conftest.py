import numpy as np
import pytest

from camloss import tensor as T

# criterion number -> (title, status, details); filled in by the report hook
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
    details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ACCEPTANCE[number] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, details = ACCEPTANCE[number]
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(line + (f" -- {details}" if details else ""))


@pytest.fixture
def double():
    with T.precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
