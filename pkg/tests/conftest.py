"""Shared test plumbing: the acceptance criteria report.

Criterion tests register one line each through ``record_acceptance``; the
lines are echoed immediately (visible under ``-s``) and replayed in the
terminal summary, so a plain ``pytest`` run always shows the per-criterion
pass lines.
"""

ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
