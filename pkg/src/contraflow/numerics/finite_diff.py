"""Central-difference Jacobians (test oracle and decoder Jacobian fallback)."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import NumericError

DEFAULT_H = 1e-5


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = DEFAULT_H) -> np.ndarray:
    """J[i, j] ≈ (f(x + h e_j) - f(x - h e_j))_i / 2h."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float).ravel()
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = np.asarray(f(x + e), dtype=float).ravel()
        fm = np.asarray(f(x - e), dtype=float).ravel()
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NumericError(f"function returned non-finite values near coordinate {j}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)
