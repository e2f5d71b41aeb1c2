"""Central finite differences, kept independent from the tape machinery."""

import numpy as np


def numeric_grad(f, arrays, index, h=1e-3):
    """d f / d arrays[index] by central differences (f returns a float)."""
    base = arrays[index]
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(*arrays)
        flat[i] = old - h
        fm = f(*arrays)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))
