import pytest

_LINES = {}


@pytest.fixture
def report():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number, passed, detail, seconds=None, budget=None):
        timing = ""
        if seconds is not None:
            timing = f" [{seconds:.1f}s"
            if budget is not None:
                timing += f", budget {budget:.0f}s{'' if seconds <= budget else ' EXCEEDED'}"
            timing += "]"
        _LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}{timing}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
