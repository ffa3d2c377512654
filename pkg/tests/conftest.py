"""Collects the acceptance verdict lines so they show up even when output is captured."""

VERDICTS = []


def record(number: int, title: str, passed: bool, detail: str = "") -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
    if detail:
        line += f" :: {detail}"
    VERDICTS.append((number, line))
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
