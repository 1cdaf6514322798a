"""SO(3) and unit-quaternion exponential/logarithm maps, and the π-ball head.

Everything stays on the first cover ‖r‖ < π, where Exp and Log are
mutually inverse.  Quaternions are scalar-first (q0, qx, qy, qz) and
canonicalized to q0 ≥ 0.
"""
from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8
LOG_GUARD = 1e-6


class FirstCoverError(ValueError):
    """A rotation coefficient left the region where Exp/Log are diffeomorphic."""


def hat(r) -> np.ndarray:
    """[r]_x, the skew matrix with [r]_x v = r x v."""
    x, y, z = np.asarray(r, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(r) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(3)
    theta = float(np.linalg.norm(r))
    if theta >= np.pi:
        raise FirstCoverError(f"‖r‖ = {theta:.6g} is not below π")
    K = hat(r)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K2
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * K2


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"expected a 3x3 rotation, got {R.shape}")
    cos_t = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta > np.pi - LOG_GUARD:
        raise FirstCoverError(f"rotation angle {theta:.9f} is within {LOG_GUARD:g} of π (Log is multivalued)")
    skew = 0.5 * (R - R.T)
    if theta < SMALL_ANGLE:
        return vee(skew)
    # sin θ from the skew part is more accurate than sqrt(1 - cos²) near 0
    s = np.linalg.norm(vee(skew))
    return (np.arctan2(s, cos_t) / s) * vee(skew) if s > 0 else vee(skew)


def quat_canonical(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_exp(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    theta = float(np.linalg.norm(v))
    if theta >= np.pi:
        raise FirstCoverError(f"‖v‖ = {theta:.6g} is not below π")
    if theta == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], (np.sin(half) / theta) * v])


def quat_log(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q[1:])
    if n < 1e-12 and q[0] < 0:
        raise FirstCoverError("quaternion near -1: Log is multivalued")
    q = quat_canonical(q)
    n = np.linalg.norm(q[1:])
    if n == 0.0:
        return np.zeros(3)
    # atan2 form of 2·arccos(q0), accurate at both ends
    return (2.0 * np.arctan2(n, q[0]) / n) * q[1:]


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = quat_canonical(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def box_to_ball(x) -> np.ndarray:
    """b(x) = (‖x‖∞ / ‖x‖₂) x; maps the box [-1, 1]^D onto the unit ball."""
    x = np.asarray(x, dtype=float)
    inf = np.max(np.abs(x), axis=-1, keepdims=True)
    if np.any(inf > 1.0):
        raise ValueError("box_to_ball input lies outside [-1, 1]^D")
    two = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(two > 0, two, 1.0)
    return np.where(two > 0, x * (inf / safe), 0.0)


def ball_to_box(y) -> np.ndarray:
    """Inverse of box_to_ball: y (‖y‖₂ / ‖y‖∞)."""
    y = np.asarray(y, dtype=float)
    two = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(two > 1.0 + 1e-12):
        raise ValueError("ball_to_box input lies outside the unit ball")
    inf = np.max(np.abs(y), axis=-1, keepdims=True)
    safe = np.where(inf > 0, inf, 1.0)
    return np.where(inf > 0, y * (two / safe), 0.0)


def pi_ball_layer(inner) -> np.ndarray:
    """h = π b(tanh(inner)); output strictly inside the π-ball."""
    return np.pi * box_to_ball(np.tanh(np.asarray(inner, dtype=float)))


def pi_ball_inverse(y) -> np.ndarray:
    """Inverse of pi_ball_layer for ‖y‖₂ < π."""
    return np.arctanh(ball_to_box(np.asarray(y, dtype=float) / np.pi))
