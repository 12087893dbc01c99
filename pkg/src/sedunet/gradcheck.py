"""Central finite differences for checking explicit backward passes."""

import numpy as np


def numeric_grad(f, x: np.ndarray, step=1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x``, perturbed in place.

    With ``indices`` (flat positions) only those entries are probed and the
    result is a 1-D array in the same order.
    """
    flat = x.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    out = []
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        up = float(f())
        flat[i] = orig - step
        down = float(f())
        flat[i] = orig
        out.append((up - down) / (2 * step))
    out = np.asarray(out)
    return out.reshape(x.shape) if indices is None else out


def rel_error(analytic, numeric) -> float:
    """``|a - n| / |n|`` in the 2-norm."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))
