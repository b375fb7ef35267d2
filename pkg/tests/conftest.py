"""Shared pytest plumbing: the acceptance-criteria summary block."""

CRITERIA_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'} — {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
