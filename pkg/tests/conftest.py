"""Shared pytest hooks: print one summary line per acceptance check."""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance checks")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
