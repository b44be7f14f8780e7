import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_verdicts: list[str] = []


@pytest.fixture
def verdict():
    """Record one summary line per acceptance criterion; printed at the end of the run."""
    def record(n: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _verdicts.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
