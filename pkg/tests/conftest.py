"""Shared test plumbing: acceptance verdicts echoed in the terminal summary."""

ACCEPTANCE_VERDICTS: list[str] = []


def record_verdict(number: int, description: str, ok: bool) -> str:
    line = f"ACCEPTANCE {number}: {description}: {'PASS' if ok else 'FAIL'}"
    ACCEPTANCE_VERDICTS.append(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
