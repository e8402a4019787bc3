import time

import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}
_START = time.perf_counter()
RUNTIME_BUDGET_S = 600.0


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict for the end-of-session summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    elapsed = time.perf_counter() - _START
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    terminalreporter.write_line(
        f"session runtime {elapsed:.1f}s against a {RUNTIME_BUDGET_S:.0f}s budget: "
        f"{'PASS' if elapsed < RUNTIME_BUDGET_S else 'FAIL'}"
    )
