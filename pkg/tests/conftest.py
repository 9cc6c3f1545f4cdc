import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one acceptance criterion's outcome for the end-of-run summary."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS[number] = (name, bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {name} | {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {name} | {detail}")
