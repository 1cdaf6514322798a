"""Small dense symmetric linear algebra: symmetric part and eigensolvers.

The eigensolver is closed form for 2x2 and cyclic Jacobi otherwise.  Both
paths are vectorized over leading batch axes so a whole grid of Jacobians
can be decomposed in one call.
"""
from __future__ import annotations

import numpy as np

MAX_DIM = 16
SYM_TOL = 1e-10


class DimensionError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


def sym_part(A) -> np.ndarray:
    """½(A + Aᵀ); exactly symmetric because fl(a+b) = fl(b+a)."""
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"sym_part needs square matrices, got shape {A.shape}")
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _eigh_2x2(S: np.ndarray):
    a = S[..., 0, 0]
    b = 0.5 * (S[..., 0, 1] + S[..., 1, 0])
    d = S[..., 1, 1]
    mid = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), b)
    w = np.stack([mid - rad, mid + rad], axis=-1)

    # eigenvector of the larger eigenvalue; pick the better-conditioned formula
    half = 0.5 * (a - d)
    # angle of the principal axis: tan(2θ) = b / half
    theta = 0.5 * np.arctan2(b, half)
    c, s = np.cos(theta), np.sin(theta)
    v_hi = np.stack([c, s], axis=-1)
    v_lo = np.stack([-s, c], axis=-1)
    V = np.stack([v_lo, v_hi], axis=-1)
    return w, V


def _eigh_jacobi(S: np.ndarray, max_sweeps: int = 50):
    batch = S.shape[:-2]
    D = S.shape[-1]
    A = S.reshape((-1, D, D)).copy()
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    n = A.shape[0]
    V = np.broadcast_to(np.eye(D), (n, D, D)).copy()
    scale = np.maximum(np.sqrt((A * A).sum(axis=(1, 2))), 1e-300)
    iu = np.triu_indices(D, 1)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (A[:, iu[0], iu[1]] ** 2).sum(axis=1))
        if np.all(off <= 1e-15 * scale):
            break
        for p in range(D - 1):
            for q in range(p + 1, D):
                apq = A[:, p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                app, aqq = A[:, p, p], A[:, q, q]
                safe = np.where(active, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- Jᵀ A J with J = [[c, s], [-s, c]] in the (p, q) plane
                cp, cq = A[:, :, p].copy(), A[:, :, q].copy()
                A[:, :, p] = c[:, None] * cp - s[:, None] * cq
                A[:, :, q] = s[:, None] * cp + c[:, None] * cq
                rp, rq = A[:, p, :].copy(), A[:, q, :].copy()
                A[:, p, :] = c[:, None] * rp - s[:, None] * rq
                A[:, q, :] = s[:, None] * rp + c[:, None] * rq
                A[:, p, q] = 0.0
                A[:, q, p] = 0.0
                vp, vq = V[:, :, p].copy(), V[:, :, q].copy()
                V[:, :, p] = c[:, None] * vp - s[:, None] * vq
                V[:, :, q] = s[:, None] * vp + c[:, None] * vq
    w = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return w.reshape(batch + (D,)), V.reshape(batch + (D, D))


def eigh_batch(S) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of symmetric matrices over leading batch axes.

    Returns ascending eigenvalues (..., D) and eigenvectors as columns
    (..., D, D).  No symmetry check; callers guarantee it.
    """
    S = np.asarray(S, dtype=float)
    D = S.shape[-1]
    if S.ndim < 2 or S.shape[-2] != D:
        raise DimensionError(f"expected square matrices, got {S.shape}")
    if D > MAX_DIM:
        raise DimensionError(f"eigensolver supports D <= {MAX_DIM}, got {D}")
    if D == 1:
        return S[..., 0].copy(), np.ones_like(S)
    if D == 2:
        return _eigh_2x2(S)
    return _eigh_jacobi(S)


def eig_sym(S) -> tuple[np.ndarray, np.ndarray]:
    """Checked eigen-decomposition of one symmetric matrix (ascending)."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"eig_sym needs one square matrix, got {S.shape}")
    if not np.isfinite(S).all():
        raise ContractViolation("matrix has non-finite entries")
    asym = np.max(np.abs(S - S.T)) if S.size else 0.0
    if asym > SYM_TOL:
        raise ContractViolation(f"matrix not symmetric (max |S - Sᵀ| = {asym:.3g})")
    return eigh_batch(S)


def eigvals_sym_batch(S) -> np.ndarray:
    return eigh_batch(S)[0]
