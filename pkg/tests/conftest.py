import sys
from pathlib import Path

import pytest

# shared test helpers (pgo_circle) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, ok, detail)."""

    def record(n, ok, detail="", soft=False):
        status = "PASS" if ok else ("MISS (soft)" if soft else "FAIL")
        _CRITERIA[n] = f"criterion {n:2d}: {status}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
