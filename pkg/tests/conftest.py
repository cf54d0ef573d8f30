"""Shared pytest wiring: surfaces the acceptance-criterion PASS/FAIL lines in
the terminal summary, where capture cannot hide them."""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
