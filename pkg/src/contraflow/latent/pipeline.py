"""Latent training (train VAE, encode demos, fit a latent NCDS) and control."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Demo, TrajectoryDataset
from ..lie import FirstCoverError, quat_log, so3_log
from ..ncds import Ncds, TrainConfig, train
from .geometry import decoder_jacobian
from .vae import InjectiveFlowVae, VaeConfig, VaeTrainConfig, reconstruction_mse, train_vae


@dataclass
class PipelineResult:
    vae: InjectiveFlowVae
    ncds: Ncds
    latent: TrajectoryDataset
    vae_history: list = field(default_factory=list)
    ncds_history: list = field(default_factory=list)


def check_first_cover(ds: TrajectoryDataset) -> None:
    """Every so3 coefficient block must satisfy ‖r‖ < π; lists offending samples."""
    bad = []
    for sl in ds.spans("so3"):
        for i, d in enumerate(ds.demos):
            norms = np.linalg.norm(d.states[:, sl], axis=1)
            for t in np.nonzero(norms >= np.pi)[0]:
                bad.append((i, int(t)))
    if bad:
        raise FirstCoverError(f"{len(bad)} samples violate ‖r‖ < π, e.g. (demo, index) {bad[:10]}")


def so3_spans_of(ds: TrajectoryDataset) -> tuple:
    return tuple((s.start, s.stop) for s in ds.spans("so3"))


def encode_dataset(vae: InjectiveFlowVae, ds: TrajectoryDataset) -> TrajectoryDataset:
    demos = [Demo(d.dt, vae.encode_mean(d.states), d.condition) for d in ds.demos]
    return TrajectoryDataset(demos, [("plain", vae.d)], ds.provenance + [f"encode_mean(d={vae.d})"])


def latent_train_pipeline(
    ds: TrajectoryDataset,
    vae_train: VaeTrainConfig | None = None,
    ncds_train: TrainConfig | None = None,
    latent_dim: int = 2,
    vae_kw: dict | None = None,
    ncds_kw: dict | None = None,
) -> PipelineResult:
    """Train the VAE on all states, encode demos, train a latent NCDS.

    Orientation columns are expected as Lie-algebra coefficients (the
    dataset schema stores them after the log map).  The latent NCDS is
    anchored at the encoded target with zero anchor velocity unless the
    caller's TrainConfig says otherwise.
    """
    check_first_cover(ds)
    vae_kw = dict(vae_kw or {})
    vae_kw.setdefault("so3_spans", so3_spans_of(ds))
    vae = InjectiveFlowVae(VaeConfig(ambient_dim=ds.dim, latent_dim=latent_dim, **vae_kw))
    X = ds.all_states()
    vae, vh = train_vae(vae, X, vae_train or VaeTrainConfig())
    latent = encode_dataset(vae, ds)
    ncds_kw = dict(ncds_kw or {})
    model = Ncds.build(latent_dim, cond_dim=ds.cond_dim, **ncds_kw)
    model, nh = train(model, latent, ncds_train or TrainConfig(anchor="target"))
    return PipelineResult(vae, model, latent, vh, nh)


def pose_to_state(position, rotation=None) -> np.ndarray:
    """Position plus Lie-algebra coefficients of a rotation matrix or quaternion."""
    position = np.asarray(position, dtype=float).reshape(-1)
    if rotation is None:
        return position
    rotation = np.asarray(rotation, dtype=float)
    if rotation.shape == (3, 3):
        r = so3_log(rotation)
    elif rotation.shape == (4,):
        r = quat_log(rotation)
    else:
        raise ValueError("rotation must be a 3x3 matrix or a scalar-first quaternion")
    if np.linalg.norm(r) >= np.pi:
        raise FirstCoverError("rotation outside the first cover")
    return np.concatenate([position, r])


def control_step(vae: InjectiveFlowVae, ncds: Ncds, pose, cond=None, method: str = "fd") -> np.ndarray:
    """Ambient velocity J_μ(z) f(z) at z = encode_mean(state).

    ``pose`` is a full state vector or a (position, rotation) pair.
    """
    if isinstance(pose, tuple):
        state = pose_to_state(*pose)
    else:
        state = np.asarray(pose, dtype=float)
    z = vae.encode_mean(state)
    zdot = ncds.velocity(z, cond)
    return decoder_jacobian(vae, z, method) @ zdot
