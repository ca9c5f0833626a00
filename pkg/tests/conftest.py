"""Collects the acceptance verdicts and prints them after the run."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one criterion line, then asserts ``ok``."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
