"""Shared pytest hooks.

The acceptance tests record one line each; printing them in the terminal
summary keeps the per-criterion verdicts visible in any run log, including
fully green ones where captured stdout would otherwise be hidden.
"""

ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
