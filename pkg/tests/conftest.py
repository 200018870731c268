"""Shared helpers for the test suite."""

import numpy as np


def central_diff_grad(f, x, h=1e-4):
    """Central finite-difference gradient of scalar f at x, elementwise.

    Perturbs in float64 regardless of x's dtype so the difference
    quotient is not dominated by storage rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(got, want, floor=1e-12):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.abs(want).max()), floor)
    return float(np.abs(got - want).max()) / denom
