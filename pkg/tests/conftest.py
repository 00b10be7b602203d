import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar f at array x (copied, not mutated)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def normwise_rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return np.abs(a - b).max() / scale
