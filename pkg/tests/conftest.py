import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(id, ok, detail)``; the test should assert ``ok`` afterwards."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        print(_VERDICTS[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
