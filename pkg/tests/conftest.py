import numpy as np
import pytest

from netmorph import mesh as meshlib


@pytest.fixture(scope="session")
def square4():
    return meshlib.generate_unit_square(4)


@pytest.fixture(scope="session")
def diamond_coarse():
    return meshlib.generate_diamond(0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
