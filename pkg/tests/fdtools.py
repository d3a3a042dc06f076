"""Shared finite-difference helpers for gradient tests."""

import numpy as np


def fd_grad(f, x, step=1e-6):
    """Dense central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def fd_grad_subset(f, x, idx, step=1e-6):
    """Central differences at a subset of flat indices; returns (idx, vals)."""
    x = np.asarray(x, dtype=np.float64)
    vals = np.zeros(len(idx))
    for k, i in enumerate(idx):
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        vals[k] = (f(xp) - f(xm)) / (2 * step)
    return vals


def assert_close_grads(analytic, numeric, rtol=1e-5, atol=1e-8, label=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = np.argmax(err - tol)
    assert np.all(err <= tol), (
        f"{label} gradient mismatch at flat index {worst}: "
        f"analytic {analytic.flat[worst]:.6e} numeric {numeric.flat[worst]:.6e}"
    )
