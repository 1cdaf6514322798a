"""Train one NCDS per synthetic shape and compare reproduction DTWD with a straight-line baseline.

    python3 scripts/reproduce_shapes.py --shapes sine,angle --epochs 1000
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from contraflow import Constant, Ncds, TrainConfig, dtwd, monotonicity_report, synth_shapes, train
from contraflow.metrics import straight_line_baseline


def run(shape: str, epochs: int, hidden, lr: float, demos: int, points: int, seed: int) -> dict:
    ds = synth_shapes(shape, demos, points, 0.05, seed=seed)
    model = Ncds.build(2, hidden=hidden, reg=Constant(1e-4), seed=seed)
    model, hist = train(model, ds, TrainConfig(lr=lr, epochs=epochs, anchor="mean", seed=seed))
    ratios = []
    for d in ds.demos:
        r = model.rollout(d.states[0], d.dt, len(d.states) - 1)
        ratios.append(dtwd(r.states, d.states) / dtwd(straight_line_baseline(d.states), d.states))
    starts = ds.demos[0].states[0] + 0.05 * np.random.default_rng(1).normal(size=(5, 2))
    mono, _ = monotonicity_report(model.pairwise_distance_curves(starts, ds.demos[0].dt, 400))
    return {"shape": shape, "dtwd_ratio": [round(float(x), 4) for x in ratios], "monotone": bool(mono),
            "vel_loss": hist[-1]["vel"]}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shapes", default="sine,angle")
    ap.add_argument("--epochs", type=int, default=1000)
    ap.add_argument("--hidden", default="64,64")
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--demos", type=int, default=5)
    ap.add_argument("--points", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    hidden = tuple(int(h) for h in a.hidden.split(","))
    for shape in a.shapes.split(","):
        t0 = time.time()
        row = run(shape, a.epochs, hidden, a.lr, a.demos, a.points, a.seed)
        print(json.dumps(row), f"({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
