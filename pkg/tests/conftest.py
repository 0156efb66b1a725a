import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
    """Register one acceptance check; printed in the terminal summary."""
    _CRITERIA.setdefault(number, []).append((name, bool(passed), detail))
    return bool(passed)


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        checks = _CRITERIA[number]
        ok = all(p for _, p, _ in checks)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}")
        for name, passed, detail in checks:
            terminalreporter.write_line(f"    [{'pass' if passed else 'FAIL'}] {name}"
                                        + (f" ({detail})" if detail else ""))
