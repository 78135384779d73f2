import numpy as np
import pytest

from outfitret.config import Hyperparams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_hyper():
    return Hyperparams(dim=8, heads=2)


# acceptance checks append (criterion, passed, detail) here; printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}")
