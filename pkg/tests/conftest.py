import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(n, ok, detail):
        prev = ACCEPTANCE.get(n, (True, ""))
        joined = f"{prev[1]}; {detail}" if prev[1] else detail
        ACCEPTANCE[n] = (prev[0] and bool(ok), joined)
        return ok
    return record
