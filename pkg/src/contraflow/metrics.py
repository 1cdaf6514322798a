"""Evaluation metrics: DTWD, demonstration hull, contraction maps, monotonicity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MONO_TOL = 1e-6


class DegenerateHullError(ValueError):
    pass


def dtwd(a, b) -> float:
    """Σ_j min_i d(a_i, b_j) + Σ_i min_j d(a_i, b_j) with Euclidean d.

    A sum of nearest-neighbour distances in both directions (no alignment).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("trajectories must be non-empty")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return float(d.min(axis=0).sum() + d.min(axis=1).sum())


# --- convex hull region ------------------------------------------------------------

@dataclass
class Polygon2:
    vertices: np.ndarray  # (n, 2), counterclockwise
    margin: float = 0.0


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; counterclockwise, collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise DegenerateHullError("need at least three distinct points")
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise DegenerateHullError("points are collinear")
    return hull


def hull_region(points, margin: float | None = None) -> Polygon2:
    """Convex hull of the points, each vertex pushed out by ``margin``.

    ``margin=None`` uses 5% of the bounding-box diagonal.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    hull = convex_hull(pts)
    if margin is None:
        margin = 0.05 * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if margin == 0:
        return Polygon2(hull, 0.0)
    n = len(hull)
    out = np.empty_like(hull)
    for i in range(n):
        prev, cur, nxt = hull[i - 1], hull[i], hull[(i + 1) % n]
        normals = []
        for a, b in ((prev, cur), (cur, nxt)):
            e = b - a
            # outward normal of a counterclockwise edge
            nrm = np.array([e[1], -e[0]]) / np.linalg.norm(e)
            normals.append(nrm)
        bis = normals[0] + normals[1]
        bis /= np.linalg.norm(bis)
        out[i] = cur + margin * bis
    return Polygon2(out, float(margin))


def _on_segment(p, a, b, tol=1e-12) -> bool:
    ab = b - a
    ap = p - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return float(np.linalg.norm(ap)) <= tol
    t = float(ap @ ab) / L2
    if t < -tol or t > 1 + tol:
        return False
    return float(np.linalg.norm(ap - t * ab)) <= tol * max(1.0, np.sqrt(L2))


def point_in_polygon(p, poly: Polygon2) -> bool:
    """Even-odd ray casting; points on the boundary count as inside."""
    V = poly.vertices
    p = np.asarray(p, dtype=float)
    n = len(V)
    inside = False
    for i in range(n):
        a, b = V[i], V[(i + 1) % n]
        if _on_segment(p, a, b):
            return True
        if (a[1] > p[1]) != (b[1] > p[1]):
            x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if p[0] < x_cross:
                inside = not inside
    return inside


def steps_in_region(traj, poly: Polygon2) -> int:
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2 or traj.shape[1] != 2:
        raise ValueError("steps_in_region needs a 2-D trajectory")
    return int(sum(point_in_polygon(p, poly) for p in traj))


# --- contraction maps ----------------------------------------------------------

def grid_points(bounds, res: int) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    (lo0, hi0), (lo1, hi1) = np.asarray(bounds, dtype=float).reshape(2, 2)
    if res == 1:
        g0, g1 = np.array([0.5 * (lo0 + hi0)]), np.array([0.5 * (lo1 + hi1)])
    else:
        g0, g1 = np.linspace(lo0, hi0, res), np.linspace(lo1, hi1, res)
    A, B = np.meshgrid(g0, g1, indexing="xy")
    return np.stack([A.ravel(), B.ravel()], axis=1), (g0, g1)


def contraction_maps(field, bounds, res: int, cond=None, dims=(0, 1), base=None) -> dict:
    """Per-cell contraction rate and spread of a Jacobian field on a grid."""
    pts2, _ = grid_points(bounds, res)
    base = np.zeros(field.dim) if base is None else np.asarray(base, dtype=float)
    pts = np.tile(base, (len(pts2), 1))
    pts[:, dims[0]] = pts2[:, 0]
    pts[:, dims[1]] = pts2[:, 1]
    if cond is not None:
        cond = np.broadcast_to(np.asarray(cond, dtype=float).reshape(1, -1), (len(pts), field.cond_dim))
    rate, spread = field.contraction_stats(pts, cond)
    rate = np.asarray(rate).reshape(res, res)
    spread = np.asarray(spread).reshape(res, res)
    return {
        "rate": rate,
        "spread": spread,
        "rate_max": float(rate.max()),
        "spread_max": float(spread.max()),
    }


# --- monotonicity ----------------------------------------------------------------

def monotonicity_report(curve, tol: float = MONO_TOL) -> tuple[bool, int | None]:
    """(c[t+1] ≤ c[t](1 + tol) for all t, index of the first violating t+1)."""
    c = np.asarray(curve, dtype=float)
    bad = np.nonzero(c[1:] > c[:-1] * (1.0 + tol))[0]
    if bad.size:
        return False, int(bad[0] + 1)
    return True, None


# --- report ----------------------------------------------------------------

@dataclass
class EvalReport:
    dtwd: list[float] = field(default_factory=list)
    dtwd_baseline: list[float] = field(default_factory=list)
    steps_in_region: list[int] = field(default_factory=list)
    total_steps: list[int] = field(default_factory=list)
    rate_max: float | None = None
    spread_max: float | None = None
    monotone: bool | None = None
    first_violation: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dtwd": self.dtwd,
            "dtwd_baseline": self.dtwd_baseline,
            "steps_in_region": self.steps_in_region,
            "steps_outside_region": [t - n for n, t in zip(self.steps_in_region, self.total_steps)],
            "total_steps": self.total_steps,
            "rate_max": self.rate_max,
            "spread_max": self.spread_max,
            "monotone": self.monotone,
            "first_violation": self.first_violation,
            "metadata": self.metadata,
        }

    def to_csv(self) -> str:
        lines = ["demo,dtwd,dtwd_baseline,steps_in_region,total_steps"]
        for i, d in enumerate(self.dtwd):
            b = self.dtwd_baseline[i] if i < len(self.dtwd_baseline) else ""
            n = self.steps_in_region[i] if i < len(self.steps_in_region) else ""
            t = self.total_steps[i] if i < len(self.total_steps) else ""
            lines.append(f"{i},{d!r},{b!r},{n},{t}")
        return "\n".join(lines) + "\n"


def straight_line_baseline(demo_states: np.ndarray) -> np.ndarray:
    """Uniformly spaced straight segment from the demo start to its end."""
    a, b = demo_states[0], demo_states[-1]
    s = np.linspace(0.0, 1.0, len(demo_states))[:, None]
    return (1.0 - s) * a + s * b
