"""Shared pytest hooks: criterion verdicts are echoed in the terminal summary."""

CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
