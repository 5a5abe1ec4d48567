import pytest

# (criterion number, passed, detail) recorded by tests/test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append((number, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
