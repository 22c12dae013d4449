"""Collects acceptance lines so they are shown even when output is captured."""

_LINES = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _LINES.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
