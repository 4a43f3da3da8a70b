import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records one acceptance line; the assertion stays in the test."""
    def _report(number: int, title: str, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        print(_CRITERIA[number])
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
