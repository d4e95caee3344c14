import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

RESULTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: verdict(number, ok, detail)."""
    def record(number, ok, detail):
        RESULTS.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}")
