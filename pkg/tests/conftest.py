import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome line of an acceptance criterion: criterion(number, passed, detail)."""

    def note(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        return passed

    return note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
