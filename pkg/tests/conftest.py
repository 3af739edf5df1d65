import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """``verdict(label, ok, detail)`` prints one PASS/FAIL line, keeps it for the summary, and asserts."""
    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        print(line)
        request.config.stash.setdefault(VERDICTS, []).append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
