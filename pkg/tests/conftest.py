import numpy as np
import pytest

from fpsa.autodiff import precision

_CRITERIA = {}


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion.

    Call ``criterion(number, title)`` first, then ``.detail(text)`` any
    number of times.  The verdict follows the test outcome.
    """

    class Recorder:
        def __call__(self, number, title):
            self.number = number
            _CRITERIA[number] = {"title": title, "detail": [], "node": request.node}
            return self

        def detail(self, text):
            _CRITERIA[self.number]["detail"].append(text)

    return Recorder()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    for entry in _CRITERIA.values():
        if entry["node"] is item:
            if report.when == "call" or (report.when == "setup" and report.skipped):
                entry["outcome"] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(entry.get("outcome"), "FAIL")
        detail = "; ".join(entry["detail"])
        terminalreporter.write_line(f"criterion {number:>2} {verdict}: {entry['title']}" + (f" ({detail})" if detail else ""))
