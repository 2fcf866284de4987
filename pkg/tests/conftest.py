import pytest

# (criterion number, passed, detail) appended by test_acceptance
ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


@pytest.fixture
def report_criterion():
    def record(number: int, status: str, detail: str) -> None:
        ACCEPTANCE_LINES.append((number, status, detail))
        print(f"criterion {number}: {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {status} {detail}")
