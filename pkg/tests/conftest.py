"""Shared pytest plumbing: the acceptance report summary.

Acceptance tests record one PASS/FAIL line per criterion; the lines are
echoed in the terminal summary so the verdicts survive pytest's output
capture and land in piped logs.
"""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record a one-line verdict for an acceptance criterion, then assert it.

    Usage: acceptance("criterion-name", ok_bool, "detail string").
    """

    def _record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  [{name}] {detail}".rstrip()
        _ACCEPTANCE_LINES.append(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance report")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
