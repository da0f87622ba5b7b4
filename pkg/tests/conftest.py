import time

import pytest

# criterion number -> (status, detail); filled by tests/test_acceptance.py
CRITERIA: dict = {}
SESSION = {"start": time.perf_counter()}


@pytest.fixture
def criterion():
    def record(number: int, passed, detail: str) -> None:
        status = "REPORT" if passed is None else ("PASS" if passed else "FAIL")
        CRITERIA[number] = (status, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status:<6} {detail}")
