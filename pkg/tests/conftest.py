import pytest

_REPORT = []


@pytest.fixture(scope="session")
def criterion_report():
    """Record one line per acceptance criterion; printed in the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _REPORT.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
