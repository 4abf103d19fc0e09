"""Shared test plumbing.

Acceptance tests register a one-line verdict here; the hook below prints
the collected lines in the terminal summary so they are visible even when
pytest captures stdout.
"""

ACCEPTANCE_LINES = []


def record_acceptance(line):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance summary")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
