import pytest

# criterion number -> (passed, detail, seconds); filled by test_acceptance.py
CRITERIA: dict = {}


def record(number: int, passed: bool, detail: str, seconds: float) -> None:
    CRITERIA[number] = (bool(passed), detail, seconds)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail}; {seconds:.1f} s)")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail, seconds = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}  [{seconds:.1f} s]")


@pytest.fixture
def criterion():
    return record
