import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict, print it, and fail the test if it did not pass."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
