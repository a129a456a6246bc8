import pytest

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one line per acceptance criterion; the lines are echoed at the end of the run."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _acceptance_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
