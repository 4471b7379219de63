import numpy as np
import pytest

from cri.generator import ToyGenerator
from cri.perception import FeatureExtractor


@pytest.fixture(scope="session")
def gen():
    return ToyGenerator()


@pytest.fixture(scope="session")
def fx():
    return FeatureExtractor()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def central_diff(f, x, idx, h=1e-5):
    """Central difference of scalar ``f`` along the flat index ``idx`` of ``x``."""
    xp, xm = x.copy(), x.copy()
    xp.flat[idx] += h
    xm.flat[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
