import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record an acceptance outcome; the line is printed in the terminal summary."""

    def record(number: int, name: str, ok: bool, detail: str = ""):
        _CRITERIA[number] = (name, bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in _CRITERIA:
            name, ok, detail = _CRITERIA[n]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"NOT RUN  {n}. no result recorded (deselected, skipped or errored early)")
