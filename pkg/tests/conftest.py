"""Shared fixtures plus the acceptance-criteria summary printer."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    _CRITERIA_LINES.append(f"criterion {number:2d} [{status}] {name}{suffix}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA_LINES):
            terminalreporter.write_line(line)
