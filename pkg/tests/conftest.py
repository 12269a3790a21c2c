"""Shared test plumbing: the acceptance suite records one line per criterion
here and the terminal-summary hook prints them after capture ends, so the
pass/fail lines are visible in plain `pytest -v` output."""

ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {number} ({name}): {status} — {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("=" * 28 + " acceptance criteria " + "=" * 28)
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
