"""Collects acceptance-criterion outcomes and prints one line per criterion."""

CRITERIA: dict[int, tuple[str, str]] = {}


def record(number: int, passed: bool | None, detail: str) -> None:
    status = "N/A" if passed is None else ("PASS" if passed else "FAIL")
    CRITERIA[number] = (status, detail)
    print(f"criterion {number:2d} {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        status, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {detail}")
