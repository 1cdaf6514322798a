"""Quadrature rules on [0, 1]."""
from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss

SCHEMES = ("midpoint", "gauss_legendre")


def quadrature_nodes(scheme: str = "gauss_legendre", n: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Nodes in [0, 1] and weights summing to 1.

    ``midpoint`` is the composite midpoint rule on n equal cells.
    """
    n = int(n)
    if n < 1:
        raise ValueError("quadrature needs at least one node")
    if scheme == "midpoint":
        nodes = (np.arange(n) + 0.5) / n
        weights = np.full(n, 1.0 / n)
    elif scheme == "gauss_legendre":
        x, w = leggauss(n)
        nodes = 0.5 * (x + 1.0)
        weights = 0.5 * w
    else:
        raise ValueError(f"unknown quadrature scheme {scheme!r}; expected one of {SCHEMES}")
    return nodes, weights
