"""Obstacle-avoiding modulation of velocity fields.

Classical variant: a sphere obstacle with Γ(x) = ‖x - o‖ / r and
eigenvalues λ_n = 1 - Γ^{-1/ρ}, λ_τ = 1 + Γ^{-1/ρ}.

Riemannian variant: a latent distance field 𝔖 = α / (𝒱_norm + floor)
built from the metric volume 𝒱 = √|det M| on a grid; eigenvalues come
from the sigmoid Ξ and a tangential escape field kicks in when the
modulated speed vanishes.

For an orthonormal basis E = [n, e_1, ...] and D = diag(λ_n, λ_τ, ...),
G = E D Eᵀ = λ_τ I + (λ_n - λ_τ) n nᵀ, which is what the batched paths
evaluate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

VOLUME_FLOOR = 1e-6


class FlatFieldError(ValueError):
    pass


class DegenerateMetricError(ValueError):
    pass


# --- classical --------------------------------------------------------------------

@dataclass
class SphereObstacle:
    center: np.ndarray
    radius: float
    reference: np.ndarray | None = None
    reactivity: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")
        if not self.reactivity > 0:
            raise ValueError("reactivity must be positive")
        self.reference = self.center.copy() if self.reference is None else np.asarray(self.reference, dtype=float)


def gamma(obs: SphereObstacle, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    if np.any(np.linalg.norm(x - obs.reference, axis=-1) == 0.0):
        raise ValueError("Γ is singular at the obstacle reference point")
    g = np.linalg.norm(x - obs.center, axis=-1) / obs.radius
    return float(g) if np.ndim(g) == 0 else g


def basis_E(n) -> np.ndarray:
    """[n, e_1, ..., e_{D-1}]: Gram-Schmidt over the canonical axes, skipping the one most parallel to n."""
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        raise ValueError("normal vector must be nonzero")
    if abs(norm - 1.0) > 1e-9:
        raise ValueError("normal vector must have unit length")
    D = n.size
    skip = int(np.argmax(np.abs(n)))
    cols = [n]
    for i in range(D):
        if i == skip:
            continue
        e = np.zeros(D)
        e[i] = 1.0
        for c in cols:
            e = e - (c @ e) * c
        # second pass keeps orthogonality at machine precision
        for c in cols:
            e = e - (c @ e) * c
        cols.append(e / np.linalg.norm(e))
    return np.stack(cols, axis=1)


def lambdas_classical(G, reactivity: float = 1.0):
    inv = np.power(1.0 / np.asarray(G, dtype=float), 1.0 / reactivity)
    return 1.0 - inv, 1.0 + inv


def _apply_G(n, lam_n, lam_t, v):
    """G v with G = λ_τ I + (λ_n - λ_τ) n nᵀ, batched over rows."""
    nv = np.sum(n * v, axis=-1, keepdims=True)
    return lam_t[..., None] * v + (lam_n - lam_t)[..., None] * nv * n


class ClassicalModulator:
    def __init__(self, obstacle: SphereObstacle):
        self.obstacle = obstacle

    def _frame(self, X):
        o = self.obstacle
        d = X - o.reference
        n = d / np.linalg.norm(d, axis=-1, keepdims=True)
        G = np.linalg.norm(X - o.center, axis=-1) / o.radius
        lam_n, lam_t = lambdas_classical(G, o.reactivity)
        return n, lam_n, lam_t

    def matrix(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        gamma(self.obstacle, x)  # singularity check
        n, lam_n, lam_t = self._frame(x[None])
        E = basis_E(n[0])
        Dm = np.diag([lam_n[0]] + [lam_t[0]] * (x.size - 1))
        return E @ Dm @ E.T

    def apply(self, X, V) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        n, lam_n, lam_t = self._frame(X)
        return _apply_G(n, lam_n, lam_t, V)


def modulate(mod, x, v) -> np.ndarray:
    """Modulated velocity for one state (either variant)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(mod, ClassicalModulator):
        gamma(mod.obstacle, x)
    return mod.apply(x[None], v[None])[0]


# --- Riemannian ---------------------------------------------------------------------

@dataclass
class XiParams:
    rho_imp: float = 1.0
    nu: float = 10.0
    lam_init: float = 0.0
    lam_end: float = 1.0
    k: float = 2.0

    def __post_init__(self):
        if not self.rho_imp < self.nu:
            raise ValueError("need rho_imp < nu")
        if not self.k > 0:
            raise ValueError("steepness k must be positive")


def xi(S, p: XiParams):
    """λ_init + (λ_end - λ_init) / (1 + exp(-k (𝔖 - (ρ + ν)/2)))."""
    S = np.asarray(S, dtype=float)
    mid = 0.5 * (p.rho_imp + p.nu)
    # logistic written via logaddexp: no overflow on either tail
    sig = np.exp(-np.logaddexp(0.0, -p.k * (S - mid)))
    out = p.lam_init + (p.lam_end - p.lam_init) * sig
    return float(out) if out.ndim == 0 else out


def xi_normal(S, p: XiParams):
    return xi(S, replace(p, lam_init=0.0, lam_end=1.0))


def xi_tangent(S, p: XiParams):
    return xi(S, replace(p, lam_init=2.0, lam_end=1.0))


@dataclass
class DistanceFieldGrid:
    lo: np.ndarray
    hi: np.ndarray
    res: int
    values: np.ndarray  # 𝔖 on the grid, shape (res, res), index [i_x, i_y]
    v_min: float
    v_max: float
    alpha: float
    vnorm: np.ndarray  # normalized volumes, same layout
    base: np.ndarray | None = None  # optional composed base field, same layout

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.vnorm = np.asarray(self.vnorm, dtype=float)
        if self.base is not None:
            self.base = np.asarray(self.base, dtype=float)
        if self.res < 2:
            raise ValueError("grid resolution must be at least 2")
        if not np.isfinite(self.values).all():
            raise ValueError("distance field has non-finite values")
        self._build()

    def _build(self):
        self.axes = (np.linspace(self.lo[0], self.hi[0], self.res), np.linspace(self.lo[1], self.hi[1], self.res))
        self._V = RegularGridInterpolator(self.axes, self.vnorm, bounds_error=False, fill_value=None)
        self._B = None
        if self.base is not None:
            self._B = RegularGridInterpolator(self.axes, self.base, bounds_error=False, fill_value=None)
        g0, g1 = np.gradient(self.values, self.axes[0], self.axes[1], edge_order=1)
        self._g0 = RegularGridInterpolator(self.axes, g0, bounds_error=False, fill_value=None)
        self._g1 = RegularGridInterpolator(self.axes, g1, bounds_error=False, fill_value=None)

    @property
    def cell(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.res - 1)

    def inside(self, z, margin_cells: float = 0.0) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        m = margin_cells * self.cell
        return np.all((z >= self.lo + m) & (z <= self.hi - m), axis=-1)

    def value(self, z):
        """𝔖 between grid nodes, from the interpolated normalized volume.

        𝔖 is convex in 𝒱_norm, so interpolating 𝒱_norm and inverting is
        closer to the exact field than interpolating 𝔖 itself.
        """
        z = np.asarray(z, dtype=float)
        Z = np.atleast_2d(z)
        out = self.alpha / (np.maximum(self._V(Z), 0.0) + VOLUME_FLOOR)
        if self._B is not None:
            out = out * self._B(Z)
        return float(out[0]) if z.ndim == 1 else out

    def vnorm_at(self, z) -> np.ndarray:
        return self._V(np.atleast_2d(np.asarray(z, dtype=float)))

    def gradient(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.stack([self._g0(z), self._g1(z)], axis=-1)

    def with_alpha(self, alpha: float) -> "DistanceFieldGrid":
        values = alpha / (self.vnorm + VOLUME_FLOOR)
        if self.base is not None:
            values = values * self.base
        return DistanceFieldGrid(self.lo, self.hi, self.res, values, self.v_min, self.v_max, float(alpha),
                                 self.vnorm, self.base)

    def to_dict(self) -> dict:
        return {
            "format": "contraflow.distance_field",
            "version": 1,
            "bounds": [[float(self.lo[0]), float(self.hi[0])], [float(self.lo[1]), float(self.hi[1])]],
            "res": int(self.res),
            "values": [float(v).hex() for v in self.values.ravel()],
            "vnorm": [float(v).hex() for v in self.vnorm.ravel()],
            "normalization": {"v_min": float(self.v_min).hex(), "v_max": float(self.v_max).hex(),
                              "alpha": float(self.alpha).hex()},
            "base": None if self.base is None else [float(v).hex() for v in self.base.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceFieldGrid":
        if d.get("format") != "contraflow.distance_field":
            raise ValueError("not a distance-field file")
        res = int(d["res"])
        vals = np.array([float.fromhex(s) for s in d["values"]]).reshape(res, res)
        vn = np.array([float.fromhex(s) for s in d["vnorm"]]).reshape(res, res)
        b = np.asarray(d["bounds"], dtype=float)
        nz = d["normalization"]
        base = d.get("base")
        if base is not None:
            base = np.array([float.fromhex(s) for s in base]).reshape(res, res)
        return cls(b[:, 0], b[:, 1], res, vals, float.fromhex(nz["v_min"]), float.fromhex(nz["v_max"]),
                   float.fromhex(nz["alpha"]), vn, base)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DistanceFieldGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


def volumes(metric_fn: Callable[[np.ndarray], np.ndarray], Z: np.ndarray) -> np.ndarray:
    return np.array([np.sqrt(abs(np.linalg.det(metric_fn(z)))) for z in Z])


def build_distance_field(metric_fn: Callable[[np.ndarray], np.ndarray], bounds, res: int,
                         rho_imp: float, boundary_samples,
                         base_field: Callable[[np.ndarray], np.ndarray] | None = None) -> DistanceFieldGrid:
    """Distance field 𝔖 = α / (𝒱_norm + 1e-6) with α fitted on obstacle-boundary samples.

    α = ρ_imp · median(𝒱_norm(boundary) + 1e-6), which puts the median
    boundary sample exactly at 𝔖 = ρ_imp (for an odd sample count).

    ``base_field`` (batched, z -> values) composes the volume scaling with
    an existing distance field, 𝔖 = (α / 𝒱_norm) · base(z).  The default
    is the volume term alone.
    """
    if res < 16:
        raise ValueError("use at least 16 cells per axis for usable gradients")
    b = np.asarray(bounds, dtype=float).reshape(2, 2)
    ax0 = np.linspace(b[0, 0], b[0, 1], res)
    ax1 = np.linspace(b[1, 0], b[1, 1], res)
    A, B = np.meshgrid(ax0, ax1, indexing="ij")
    Z = np.stack([A.ravel(), B.ravel()], axis=1)
    V = volumes(metric_fn, Z).reshape(res, res)
    v_min, v_max = float(V.min()), float(V.max())
    if not v_max > v_min:
        raise DegenerateMetricError("metric volume is constant over the grid; the distance field is undefined")
    vnorm = (V - v_min) / (v_max - v_min)
    alpha = calibrate_alpha_value(metric_fn, boundary_samples, rho_imp, v_min, v_max)
    values = alpha / (vnorm + VOLUME_FLOOR)
    base = None
    if base_field is not None:
        base = np.asarray(base_field(Z), dtype=float).reshape(res, res)
        values = values * base
    return DistanceFieldGrid(b[:, 0], b[:, 1], res, values, v_min, v_max, alpha, vnorm, base)


def calibrate_alpha_value(metric_fn, boundary_samples, rho_imp: float, v_min: float, v_max: float) -> float:
    Zb = np.atleast_2d(np.asarray(boundary_samples, dtype=float))
    if len(Zb) == 0:
        raise ValueError("need at least one boundary sample")
    vb = (volumes(metric_fn, Zb) - v_min) / (v_max - v_min)
    return float(rho_imp * np.median(vb + VOLUME_FLOOR))


def recalibrate(grid: DistanceFieldGrid, boundary_samples, rho_imp: float) -> DistanceFieldGrid:
    """Refit α on new boundary samples using the grid's stored normalized volumes."""
    Zb = np.atleast_2d(np.asarray(boundary_samples, dtype=float))
    if len(Zb) == 0:
        raise ValueError("need at least one boundary sample")
    alpha = float(rho_imp * np.median(grid.vnorm_at(Zb) + VOLUME_FLOOR))
    return grid.with_alpha(alpha)


def calibration_report(grid: DistanceFieldGrid, p: XiParams, inside_fn: Callable | None = None) -> dict:
    """How well the field separates regions: 𝔖 < ρ_imp inside the obstacle, 𝔖 > ν outside.

    Violation fractions are reported, never corrected.
    """
    A, B = np.meshgrid(*grid.axes, indexing="ij")
    Z = np.stack([A.ravel(), B.ravel()], axis=1)
    S = grid.values.ravel()
    rep = {"alpha": grid.alpha, "rho_imp": p.rho_imp, "nu": p.nu,
           "frac_below_rho": float(np.mean(S < p.rho_imp)), "frac_above_nu": float(np.mean(S > p.nu))}
    if inside_fn is not None:
        ins = np.array([bool(inside_fn(z)) for z in Z])
        rep["inside_violation"] = float(np.mean(S[ins] >= p.rho_imp)) if ins.any() else None
        rep["outside_violation"] = float(np.mean(S[~ins] <= p.nu)) if (~ins).any() else None
    return rep


def normal_from_field(grid: DistanceFieldGrid, z) -> np.ndarray:
    """Unit gradient of 𝔖 at z (points towards safer, higher-𝔖 regions)."""
    z = np.asarray(z, dtype=float)
    if not grid.inside(z, margin_cells=1.0)[0]:
        raise ValueError("z must lie inside the grid, at least one cell away from its edge")
    g = grid.gradient(z)[0]
    nrm = np.linalg.norm(g)
    if nrm < 1e-12:
        raise FlatFieldError(f"distance-field gradient vanishes at {z.tolist()}")
    return g / nrm


def tangential_field(n, target_dir) -> np.ndarray:
    """The 90° rotation of n better aligned with target_dir (ties: counterclockwise)."""
    n = np.asarray(n, dtype=float)
    t = np.asarray(target_dir, dtype=float)
    ccw = np.array([-n[1], n[0]])
    cw = -ccw
    return ccw if ccw @ t >= cw @ t else cw


class RiemannianModulator:
    """Latent-space modulation driven by a DistanceFieldGrid.

    Outside the grid, and where the field is flat while already in the
    inactive range (𝔖 ≥ ν), the velocity passes through unchanged.
    ``sigma_beta`` is absolute; callers usually pass 0.05 times the mean
    demonstration speed.
    """

    def __init__(self, grid: DistanceFieldGrid, params: XiParams | None = None,
                 sigma_beta: float = 0.05, target=None):
        self.grid = grid
        self.p = params or XiParams()
        if not sigma_beta > 0:
            raise ValueError("sigma_beta must be positive")
        self.sigma_beta = float(sigma_beta)
        self.target = None if target is None else np.asarray(target, dtype=float)

    def eigenvalues(self, S):
        return xi_normal(S, self.p), xi_tangent(S, self.p)

    def matrix(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        S = self.grid.value(z)
        n = normal_from_field(self.grid, z)
        lam_n, lam_t = self.eigenvalues(S)
        E = basis_E(n)
        return E @ np.diag([lam_n, lam_t]) @ E.T

    def apply(self, Z, V) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        out = V.copy()
        active = self.grid.inside(Z, margin_cells=1.0)
        if not active.any():
            return out
        Za, Va = Z[active], V[active]
        S = self.grid.value(Za)
        g = self.grid.gradient(Za)
        gn = np.linalg.norm(g, axis=-1)
        flat = gn < 1e-12
        if np.any(flat & (S < self.p.nu)):
            bad = Za[flat & (S < self.p.nu)][0]
            raise FlatFieldError(f"distance-field gradient vanishes at {bad.tolist()} inside the active range")
        keep = ~flat
        Za, Va, S, g, gn = Za[keep], Va[keep], S[keep], g[keep], gn[keep]
        n = g / gn[:, None]
        lam_n, lam_t = self.eigenvalues(S)
        Gv = _apply_G(n, lam_n, lam_t, Va)
        beta = np.exp(-np.sum(Gv * Gv, axis=-1) / self.sigma_beta ** 2)
        if self.target is not None:
            tdir = self.target - Za
        else:
            tdir = Va
        ccw = np.stack([-n[:, 1], n[:, 0]], axis=-1)
        sign = np.where(np.sum(ccw * tdir, axis=-1) >= np.sum(-ccw * tdir, axis=-1), 1.0, -1.0)
        tang = ccw * sign[:, None]
        Gg = _apply_G(n, lam_n, lam_t, tang)
        speed = np.linalg.norm(Va, axis=-1)
        res = Gv + (beta * speed)[:, None] * Gg
        idx = np.nonzero(active)[0][keep]
        out[idx] = res
        return out


def modulate_riemannian(mod: RiemannianModulator, z, v, target=None) -> np.ndarray:
    """G v + β ‖v‖ G g at one latent point, with β = exp(-‖G v‖² / σ_β²)."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    if target is not None:
        mod = RiemannianModulator(mod.grid, mod.p, mod.sigma_beta, target)
    return mod.apply(z[None], v[None])[0]
