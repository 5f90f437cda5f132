"""Collect acceptance outcomes and print one line per criterion at the end of the run."""
import re

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        prev = _OUTCOMES.get(n, "PASS")
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _OUTCOMES[n] = "FAIL" if "FAIL" in (prev, status) else status


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    from tests.test_acceptance import DETAILS, TITLES

    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        detail = DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n} {TITLES[n]}: {_OUTCOMES[n]}  {detail}".rstrip())
