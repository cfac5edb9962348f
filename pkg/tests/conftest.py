"""Shared fixtures: the acceptance-criterion reporter and its summary hook."""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record and assert one acceptance-criterion verdict.

    Usage: ``criterion(num, ok, detail, elapsed, budget_s)``. The verdict
    line is printed immediately, echoed in the terminal summary, and the
    assertion carries the same text so failures are self-describing.
    """

    def _report(num: int, ok: bool, detail: str, elapsed: float,
                budget_s: float | None = None) -> None:
        within = budget_s is None or elapsed < budget_s
        mark = "PASS" if (ok and within) else "FAIL"
        timing = f"{elapsed:.1f}s" + (f" / budget {budget_s:.0f}s" if budget_s else "")
        line = f"[C{num}] {mark} {detail} ({timing})"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
        assert within, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
