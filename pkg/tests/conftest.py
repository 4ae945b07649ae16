import pytest

CRITERIA = 10
_outcomes: dict[int, bool] = {}


@pytest.fixture
def criterion():
    """Record an acceptance outcome, then assert it."""

    def record(number: int, ok: bool, detail: str = ""):
        _outcomes[number] = bool(ok)
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        state = {True: "PASS", False: "FAIL"}.get(_outcomes.get(n), "NOT RUN")
        terminalreporter.write_line(f"criterion {n}: {state}")
