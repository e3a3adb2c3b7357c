"""Shared pytest hooks.

The acceptance tests register one verdict line per criterion; printing them
from the terminal-summary hook keeps the lines visible even though pytest
captures test stdout at the file-descriptor level.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
