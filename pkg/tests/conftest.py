"""Surfaces the acceptance sign-off lines in the terminal summary.

The acceptance tests each leave their `[criterion N] PASS/FAIL` line on
the test function; collecting them here keeps the lines visible in plain
`pytest -v` logs, where captured stdout of passing tests is hidden.
"""

import pytest

_lines = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    yield
    if call.when == "call":
        line = getattr(item.function, "criterion_line", None)
        if line:
            _lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for line in _lines:
            terminalreporter.line(line)
