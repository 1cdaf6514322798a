"""Stack 2-D shapes into an 8-D dataset, learn a 2-D latent NCDS, and report reconstruction and contraction.

    python3 scripts/latent_pipeline.py --eps 0.5
"""
from __future__ import annotations

import argparse
import json

import numpy as np

from contraflow import Constant, TrainConfig, monotonicity_report, synth_shapes
from contraflow.data import stack
from contraflow.latent import (InjectiveFlowVae, VaeConfig, VaeTrainConfig, control_step, latent_train_pipeline,
                               reconstruction_mse)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shapes", default="sine,angle,line,sharpc")
    ap.add_argument("--eps", type=float, default=0.5, help="constant contraction floor of the latent field")
    ap.add_argument("--vae-epochs", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    parts = [synth_shapes(s, n_demos=3, n_points=100, seed=a.seed) for s in a.shapes.split(",")]
    ds = parts[0]
    for p in parts[1:]:
        ds = stack(ds, p)
    vae_kw = {"hidden": (32, 32), "obs_std": 0.05, "n_layers": 4}
    X = ds.all_states()
    mse0 = reconstruction_mse(InjectiveFlowVae(VaeConfig(ambient_dim=ds.dim, latent_dim=2, **vae_kw)), X)
    res = latent_train_pipeline(ds, VaeTrainConfig(lr=3e-3, epochs=a.vae_epochs, seed=a.seed),
                                TrainConfig(lr=1e-3, epochs=a.epochs, anchor="target", seed=a.seed),
                                latent_dim=2, vae_kw=vae_kw, ncds_kw={"hidden": (64, 64), "reg": Constant(a.eps)})
    lat = res.latent
    starts = lat.demos[0].states[0] + 0.05 * np.random.default_rng(1).normal(size=(5, 2))
    curve = res.ncds.pairwise_distance_curves(starts, lat.demos[0].dt, 400)
    mono, first_bad = monotonicity_report(curve)
    u = control_step(res.vae, res.ncds, ds.demos[0].states[0])
    print(json.dumps({
        "ambient_dim": ds.dim,
        "recon_mse_before": mse0,
        "recon_mse_after": reconstruction_mse(res.vae, X),
        "latent_vel_loss": res.ncds_history[-1]["vel"],
        "monotone": bool(mono),
        "first_violation": first_bad,
        "max_step_ratio": float(np.max(curve[1:] / curve[:-1])),
        "control_at_start": [round(float(x), 5) for x in u],
    }, indent=2))


if __name__ == "__main__":
    main()
