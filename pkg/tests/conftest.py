import verdicts


def pytest_terminal_summary(terminalreporter):
    if not verdicts.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts.LINES):
        terminalreporter.write_line(verdicts.LINES[n])
