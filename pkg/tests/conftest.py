"""Collects acceptance verdicts and prints them at the end of the session."""

import pytest

_VERDICTS: list[tuple[int, bool, str]] = []


@pytest.fixture()
def verdict():
    """Record ``verdict(number, ok, detail)`` for the acceptance summary, then assert ``ok``."""

    def record(number: int, ok: bool, detail: str) -> None:
        ok = bool(ok)
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, ok, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
