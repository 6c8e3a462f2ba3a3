import numpy as np
import pytest


def rel_error(approx, exact):
    """Norm-based relative error between two arrays."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.linalg.norm(exact), 1e-12)
    return np.linalg.norm(approx - exact) / denom


def finite_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar f(arrays) w.r.t. every entry.

    Mutates entries in place during probing and restores them; ``f`` must
    re-read the arrays on every call.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, tol, floor=1e-6):
    """Relative check with an absolute floor for genuinely-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), floor)
    assert diff <= tol * scale, f"gradient mismatch: {diff} > {tol} * {scale}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
