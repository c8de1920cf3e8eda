import numpy as np
import pytest

from htiv.core import FactorialDataset, PanelDataset


@pytest.fixture
def toy_factorial():
    # four units, perfect compliance, p = 0.5
    z = np.array([[1], [1], [0], [0]])
    return FactorialDataset(z=z, d=z.copy(), y=np.array([3.0, 1.0, 1.0, 1.0]), assign_probs=[0.5])


@pytest.fixture
def toy_panel():
    z = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    d = np.array([[1, 0], [0, 1], [0, 1], [0, 0]])
    y = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 2.0], [1.0, 0.5]])
    return PanelDataset(z=z, d=d, y=y, propensity=[0.5, 0.5])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
