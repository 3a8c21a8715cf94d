from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and echo one acceptance line, then assert on it."""

    def _verdict(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(_VERDICTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
