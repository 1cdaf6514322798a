"""Decoder Jacobians, velocity lifting, pullback metrics and manifold return."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import autodiff as ad
from ..numerics.autodiff import Var
from .vae import InjectiveFlowVae

FD_STEP = 1e-6
RANK_TOL = 1e-10


def decoder_jacobian(vae: InjectiveFlowVae, z, method: str = "fd", h: float = FD_STEP) -> np.ndarray:
    """J_μ(z) = ∂decode/∂z as a (D, d) matrix.

    ``fd``: column-wise central differences (all 2d points decoded in one
    batch).  ``exact``: one reverse sweep over D stacked copies of z.
    """
    z = np.asarray(z, dtype=float).reshape(vae.d)
    if method == "fd":
        E = np.eye(vae.d) * h
        pts = np.concatenate([z + E, z - E])
        out = vae.decode(pts)
        return ((out[:vae.d] - out[vae.d:]) / (2.0 * h)).T
    if method == "exact":
        Z = Var(np.tile(z, (vae.D, 1)))
        Y = vae.decode(Z)
        loss = ad.vsum(Y * np.eye(vae.D))
        ad.backward(loss)
        return np.asarray(Z.grad)
    raise ValueError(f"unknown Jacobian method {method!r}")


def jacobian_rank_ok(J: np.ndarray) -> bool:
    """False when the smallest singular value falls below 1e-10 (flagged, not fatal)."""
    return bool(np.linalg.svd(J, compute_uv=False).min() >= RANK_TOL)


def decode_velocity(vae: InjectiveFlowVae, z, zdot, method: str = "fd") -> np.ndarray:
    zdot = np.asarray(zdot, dtype=float)
    if zdot.shape[-1] != vae.d:
        raise ValueError(f"latent velocity must have dimension {vae.d}")
    return decoder_jacobian(vae, z, method) @ zdot


@dataclass
class AmbientMetric:
    """Bump metric (1 + w exp(-‖x_p - o‖² / 2r²)) I on the position block, identity elsewhere."""

    weight: float = 0.0
    center: np.ndarray | None = None
    radius: float = 1.0
    position: tuple = (0, 3)  # column range of the position block

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("bump weight must be non-negative")
        if not self.radius > 0:
            raise ValueError("bump radius must be positive")
        a, b = self.position
        self.center = np.zeros(b - a) if self.center is None else np.asarray(self.center, dtype=float)
        if self.center.size != b - a:
            raise ValueError("obstacle center must match the position block size")

    def factor(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a, b = self.position
        d2 = np.sum((x[..., a:b] - self.center) ** 2, axis=-1)
        return 1.0 + self.weight * np.exp(-d2 / (2.0 * self.radius ** 2))


def ambient_metric_at(amb: AmbientMetric | None, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    D = x.shape[-1]
    M = np.eye(D)
    if amb is None:
        return M
    a, b = amb.position
    M[a:b, a:b] *= amb.factor(x)
    return M


def pullback_metric(vae: InjectiveFlowVae, z, amb: AmbientMetric | None = None,
                    include_sigma: bool = False, method: str = "fd") -> np.ndarray:
    """M(z) = J_μᵀ M_amb J_μ  (+ J_sᵀ J_s with s(z) = σ(decode(z)) when requested)."""
    z = np.asarray(z, dtype=float).reshape(vae.d)
    J = decoder_jacobian(vae, z, method)
    x = vae.decode(z)
    Ma = ambient_metric_at(amb, x)
    M = J.T @ Ma @ J
    if include_sigma:
        E = np.eye(vae.d) * FD_STEP
        pts = np.concatenate([z + E, z - E])
        s = vae.encode_sigma(vae.decode(pts))
        Js = ((s[:vae.d] - s[vae.d:]) / (2.0 * FD_STEP)).T
        M = M + Js.T @ Js
    return 0.5 * (M + M.T)


def metric_volume(M) -> float:
    return float(np.sqrt(abs(np.linalg.det(M))))


def transition_to_manifold(vae: InjectiveFlowVae, x, steps: int) -> np.ndarray:
    """Ambient path that shrinks the extra pre-flow coordinates linearly to zero.

    Row s (s = 0..S) decodes [z_m, (1 - s/S) z_e]; the last row is decode(z_m).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    u = np.asarray(vae.to_preflow(np.asarray(x, dtype=float)))
    scale = 1.0 - np.arange(steps + 1) / steps
    U = np.tile(u, (steps + 1, 1))
    U[:, vae.d:] *= scale[:, None]
    U[-1, vae.d:] = 0.0
    return vae.from_preflow(U)
