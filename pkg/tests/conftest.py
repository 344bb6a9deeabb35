import time

import pytest

SUITE_BUDGET_S = 60.0

_results: dict[int, tuple[str, bool, str]] = {}
_started = time.perf_counter()


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(n, title, ok, detail)``."""

    def record(n, title, ok, detail=""):
        _results[n] = (title, bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    elapsed = time.perf_counter() - _started
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, detail = _results[n]
        if n == 10:
            ok = ok and elapsed < SUITE_BUDGET_S
            detail = f"{detail}; suite {elapsed:.1f}s of {SUITE_BUDGET_S:.0f}s"
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})")


def pytest_sessionfinish(session, exitstatus):
    if 10 in _results and time.perf_counter() - _started >= SUITE_BUDGET_S:
        session.exitstatus = pytest.ExitCode.TESTS_FAILED
