import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""

    def report(number, title, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
