"""Shared oracles: central finite differences in 64-bit mode."""

import numpy as np
import pytest


def fd_grad(fn, x, h=1e-4):
    """Central finite-difference gradient of a scalar function of one array.

    ``fn`` must not retain references into ``x``; evaluation happens at
    float64 precision, mutating ``x`` element-wise and restoring it.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-5, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape, f"{label}: shape mismatch"
    diff = np.abs(analytic - numeric)
    tol = atol + rtol * np.abs(numeric)
    worst = (diff - tol).max()
    assert np.all(diff <= tol), (
        f"{label}: gradient mismatch, worst excess {worst:.3e}, "
        f"max diff {diff.max():.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
