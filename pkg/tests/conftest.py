import pytest

_LINES = {}


@pytest.fixture
def acceptance_record():
    def record(number, line):
        _LINES[number] = line
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
