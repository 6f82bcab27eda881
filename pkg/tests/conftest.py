"""Shared pytest hooks: prints the acceptance-criteria summary."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per release criterion, after the test report."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    if mod is None:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(mod.CRITERIA):
        result = mod.RESULTS.get(num)
        if result is None:
            status, detail = "NOT RUN", ""
        else:
            status = "PASS" if result[0] else "FAIL"
            detail = result[1]
        line = f"[{status}] {num:>2}. {mod.CRITERIA[num]}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
