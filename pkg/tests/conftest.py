import pytest

# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def accept():
    return record
