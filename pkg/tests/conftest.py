import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        num = int(report.nodeid.rsplit("test_criterion_", 1)[1].split("_", 1)[0])
        _criteria.setdefault(num, []).append((report.outcome, report.nodeid.rsplit("::", 1)[1]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        results = _criteria[num]
        ok = all(outcome == "passed" for outcome, _ in results)
        names = ", ".join(sorted({name for _, name in results}))
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({names})")
