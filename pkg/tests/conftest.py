import numpy as np
import pytest

from conjlab.labcli import run_scenario


@pytest.fixture(scope="session")
def reports():
    """Lazily built full reports, one run per built-in scenario."""
    cache = {}

    def get(sid):
        if sid not in cache:
            cache[sid] = run_scenario(sid)
        return cache[sid]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance lines are collected here and echoed in the terminal summary so
# they show up without -s
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def criterion():
    """record(n, checks): checks is a list of (description, passed)."""

    def record(n, checks):
        failed = [d for d, ok in checks if not ok]
        line = f"criterion {n}: {'FAIL' if failed else 'PASS'}"
        line += f" ({'; '.join(failed)})" if failed else f" ({len(checks)} checks)"
        ACCEPTANCE_LINES[n] = line
        print(line)
        assert not failed, line

    return record
