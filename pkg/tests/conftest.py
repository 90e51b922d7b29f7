import numpy as np
import pytest

from robustleak import nn


def central_diff(f, x, h=1e-4):
    """Central finite differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def random_model(sizes, seed):
    return nn.init_model(sizes, np.random.default_rng(seed))


def single_layer(w, b=None):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    b = np.zeros(w.shape[0]) if b is None else b
    return nn.Model([w], [b])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
