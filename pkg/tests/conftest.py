import numpy as np
import pytest
from hypothesis import settings

from odmbandit.env import generate_navigation

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def small_spec():
    return generate_navigation(4, 3, (2, 2), 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
