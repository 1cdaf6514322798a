"""Command-line experiment runner.

Every artifact embeds the effective config and git-style blob hashes of
its inputs.  JSON outputs carry them as keys; CSV outputs carry them as
leading ``#`` comment lines.

Exit codes: 0 ok, 2 usage, 3 training failure, 4 I/O, 5 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from .config import ConfigError, RunConfig
from .data import SHAPES, SchemaError, TrajectoryDataset
from .jacobian_field import Constant, Eigenvalue, StateDependent, StateIndependent
from .latent import AmbientMetric, InjectiveFlowVae, VaeTrainConfig, latent_train_pipeline, pullback_metric
from .latent.vae import VaeTrainingError
from .metrics import (EvalReport, contraction_maps, dtwd, hull_region, monotonicity_report, steps_in_region,
                      straight_line_baseline)
from .modulation import (ClassicalModulator, DistanceFieldGrid, RiemannianModulator, SphereObstacle, XiParams,
                         build_distance_field, calibration_report, recalibrate)
from .ncds import Ncds, TrainConfig, TrainingError, train
from .numerics.rng import make_rng

EXIT_USAGE, EXIT_TRAIN, EXIT_IO, EXIT_DIVERGED = 2, 3, 4, 5
RUN_FORMAT = "contraflow.run_model"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- artifact helpers ----------------------------------------------------------------

def blob_sha1(content: bytes) -> str:
    """Git's object id for a blob with these bytes."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(content))
    h.update(content)
    return h.hexdigest()


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e.strerror or e}") from e


def input_hashes(paths) -> dict:
    return {str(p): blob_sha1(_read_bytes(p)) for p in paths if p is not None}


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e.strerror or e}") from e


def write_json(path, obj) -> None:
    _write(path, json.dumps(obj, indent=1) + "\n")


def csv_header(command: str, cfg: RunConfig, inputs: dict) -> str:
    return (f"# contraflow {command}\n"
            f"# config: {json.dumps(cfg.to_dict(), separators=(',', ':'))}\n"
            f"# inputs: {json.dumps(inputs, separators=(',', ':'))}\n")


def _fmt(v) -> str:
    return repr(float(v))


def _load_dataset(path) -> TrajectoryDataset:
    raw = _read_bytes(path)
    try:
        return dio.from_json_dict(json.loads(raw))
    except json.JSONDecodeError as e:
        raise CliError(EXIT_IO, f"{path}: invalid JSON: {e}") from e
    except SchemaError as e:
        raise CliError(EXIT_IO, f"{path}: {e}") from e


def _load_model(path):
    raw = _read_bytes(path)
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CliError(EXIT_IO, f"{path}: invalid JSON: {e}") from e
    try:
        if obj.get("format") == RUN_FORMAT:
            ncds = Ncds.from_dict(obj["ncds"])
            vae = InjectiveFlowVae.from_dict(obj["vae"]) if obj.get("vae") else None
            return ncds, vae
        return Ncds.from_dict(obj), None
    except (KeyError, ValueError, TypeError) as e:
        raise CliError(EXIT_IO, f"{path}: not a model file ({e})") from e


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"--{name}: expected comma-separated numbers") from e


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# --- flag table ---------------------------------------------------------------------
# (flag, section, key, parser, help); section None means the top-level seed.

FLAG_TABLE = {
    "seed": (None, "seed", int, "random seed"),
    "out": ("output", "out", str, "output path"),
    "shape": ("data", "shape", str, f"shape name or comma list of {SHAPES}"),
    "combine": ("data", "combine", str, "stack | concat (for comma lists)"),
    "demos": ("data", "demos", int, "demos per shape"),
    "points": ("data", "points", int, "points per demo"),
    "noise": ("data", "noise", float, "per-demo jitter std"),
    "trim-head": ("data", "trim_head", int, "samples dropped from each demo start"),
    "resample": ("data", "resample_n", int, "arc-length resampling count"),
    "pose-scale": ("data", "pose_scale", float, "lift to position(3) + so3(3) with this scale"),
    "epochs": ("train", "epochs", int, "training epochs"),
    "lr": ("train", "lr", float, "Adam learning rate"),
    "batch-size": ("train", "batch_size", int, "minibatch size (default full batch)"),
    "anchor": ("train", "anchor", str, "mean | target"),
    "latent": ("train", "latent", int, "latent dimension; trains VAE + latent model"),
    "reg": ("model", "reg", str, "constant | state-independent | state-dependent | eigenvalue"),
    "beta": ("model", "beta", float, "regularization weight β"),
    "eps": ("model", "eps", float, "constant ε"),
    "hidden": ("model", "hidden", _ints, "hidden widths, comma list"),
    "activation": ("model", "activation", str, "tanh | softplus | relu | ..."),
    "mode": ("model", "mode", str, "contractive | unconstrained"),
    "quad-nodes": ("model", "quad_nodes", int, "quadrature nodes"),
    "vae-epochs": ("vae", "epochs", int, "VAE epochs"),
    "vae-lr": ("vae", "lr", float, "VAE learning rate"),
    "vae-layers": ("vae", "n_layers", int, "coupling layers"),
    "coupling": ("vae", "coupling", str, "affine | spline"),
    "obs-std": ("vae", "obs_std", float, "VAE observation noise std"),
    "dt": ("eval", "dt", float, "integration step"),
    "steps": ("eval", "steps", int, "integration steps"),
    "res": ("eval", "res", int, "grid resolution per axis"),
    "bounds": ("eval", "bounds", None, "x_lo,x_hi,y_lo,y_hi"),
    "hull-margin": ("eval", "hull_margin", float, "outward hull offset"),
    "n-starts": ("eval", "n_starts", int, "starts for the distance curve"),
    "start-spread": ("eval", "start_spread", float, "std of the perturbed starts"),
    "start": ("eval", "start", None, "start state(s): comma list, ';' between starts"),
    "cond": ("eval", "cond", None, "condition vector, comma list"),
    "format": ("output", "format", str, "csv | svg"),
    "obstacle": ("modulation", "obstacle", None, "cx,cy[,cz],r"),
    "field": ("modulation", "field", str, "distance-field grid JSON"),
    "reactivity": ("modulation", "reactivity", float, "classical reactivity ρ"),
    "rho-imp": ("modulation", "rho_imp", float, "impenetrable distance"),
    "nu": ("modulation", "nu", float, "inactive distance"),
    "k": ("modulation", "k", float, "Ξ steepness"),
    "sigma-beta-scale": ("modulation", "sigma_beta_scale", float, "σ_β relative to mean demo speed"),
    "grid-res": ("modulation", "res", int, "distance-field resolution"),
    "grid-bounds": ("modulation", "bounds", None, "x_lo,x_hi,y_lo,y_hi of the distance field"),
    "bump": ("modulation", "bump", None, "c_1,..,c_m,radius,weight of the ambient bump metric"),
    "boundary-circle": ("modulation", "boundary_circle", None, "cx,cy,r,n latent boundary samples"),
}

COMMAND_FLAGS = {
    "gen-data": ["seed", "out", "shape", "combine", "demos", "points", "noise", "trim-head", "resample",
                 "pose-scale"],
    "train": ["seed", "out", "epochs", "lr", "batch-size", "anchor", "latent", "reg", "beta", "eps", "hidden",
              "activation", "mode", "quad-nodes", "vae-epochs", "vae-lr", "vae-layers", "coupling", "obs-std"],
    "rollout": ["seed", "out", "dt", "steps", "start", "cond"],
    "field": ["seed", "out", "res", "bounds", "cond", "format"],
    "eval": ["seed", "out", "dt", "steps", "res", "bounds", "hull-margin", "n-starts", "start-spread", "cond"],
    "modulate": ["seed", "out", "dt", "steps", "start", "cond", "obstacle", "field", "reactivity", "rho-imp", "nu",
                 "k", "sigma-beta-scale"],
    "calibrate-alpha": ["seed", "out", "field", "rho-imp", "nu", "k", "grid-res", "grid-bounds", "bump",
                        "boundary-circle"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contraflow", description="Contractive dynamical systems toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, flags in COMMAND_FLAGS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="JSON run config; flags override its values")
        for name in flags:
            _, _, _, hlp = FLAG_TABLE[name]
            sp.add_argument(f"--{name}", default=None, help=hlp)
        if cmd == "gen-data":
            sp.add_argument("--no-align", action="store_true", default=None, help="skip target alignment")
        if cmd == "train":
            sp.add_argument("--data", required=True, help="dataset JSON")
            sp.add_argument("--history", default=None, help="loss-history CSV path")
            sp.add_argument("--cond", action="store_true", help="conditional model on the dataset's conditions")
            sp.add_argument("--skew", action="store_true", default=None, help="add the D=3 skew component")
        if cmd in ("rollout", "field", "eval", "modulate"):
            sp.add_argument("--model", required=True, help="model JSON")
            sp.add_argument("--data", required=(cmd == "eval"), default=None, help="dataset JSON")
        if cmd == "calibrate-alpha":
            sp.add_argument("--model", default=None, help="model JSON with a VAE (pullback metric)")
    return p


def effective_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            cfg.update(json.loads(_read_bytes(args.config)))
        except json.JSONDecodeError as e:
            raise CliError(EXIT_IO, f"{args.config}: invalid JSON: {e}") from e
        except ConfigError as e:
            raise CliError(EXIT_USAGE, f"{args.config}: {e}") from e
    for name in COMMAND_FLAGS[args.command]:
        raw = getattr(args, name.replace("-", "_"), None)
        if raw is None:
            continue
        section, key, conv, _ = FLAG_TABLE[name]
        try:
            if name == "start":
                val = [_floats(s, name) for s in raw.split(";") if s.strip()]
            else:
                val = _floats(raw, name) if conv is None else conv(raw)
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"--{name}: {e}") from e
        if section is None:
            cfg.seed = val
        else:
            setattr(getattr(cfg, section), key, val)
    if getattr(args, "no_align", None):
        cfg.data.align_target = False
    if args.command == "train":
        if args.cond:
            cfg.train.cond = True
        if args.skew:
            cfg.model.skew = True
        if args.history is not None:
            cfg.output.history = args.history
    return cfg


# --- commands ---------------------------------------------------------------------

def _make_dataset(cfg: RunConfig) -> TrajectoryDataset:
    dc = cfg.data
    names = [s.strip() for s in dc.shape.split(",") if s.strip()]
    bad = [n for n in names if n not in SHAPES]
    if not names or bad:
        raise CliError(EXIT_USAGE, f"unknown shape {','.join(bad) or dc.shape!r}; valid names: {', '.join(SHAPES)}")
    if dc.combine not in ("stack", "concat"):
        raise CliError(EXIT_USAGE, "--combine must be 'stack' or 'concat'")
    if dc.points < 10 or dc.demos < 1:
        raise CliError(EXIT_USAGE, "need --points >= 10 and --demos >= 1")
    parts = [dio.synth_shapes(n, dc.demos, dc.points, dc.noise, cfg.seed + i) for i, n in enumerate(names)]
    parts = [dio.preprocess(p, dc.trim_head, dc.align_target, dc.resample_n) for p in parts]
    if len(parts) == 1:
        ds = parts[0]
    elif dc.combine == "stack":
        ds = parts[0]
        for p in parts[1:]:
            ds = dio.stack(ds, p)
    else:
        ds = dio.concat_datasets(*[dio.with_condition(p, [float(i)]) for i, p in enumerate(parts)])
    if dc.pose_scale is not None:
        ds = dio.synth_pose_dataset(ds, dc.pose_scale)
    return ds


def cmd_gen_data(args, cfg: RunConfig) -> int:
    try:
        ds = _make_dataset(cfg)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from e
    ds = ds.with_provenance("cli config " + json.dumps(cfg.to_dict(), separators=(",", ":")))
    out = cfg.output.out or "data.json"
    _write(out, dio.dumps(ds) + "\n")
    n_pts = sum(len(d.states) for d in ds.demos)
    print(f"wrote {out}: demos={len(ds.demos)} points={n_pts} dim={ds.dim}")
    return 0


def _strategy(mc):
    if mc.reg == "constant":
        return Constant(eps=mc.eps)
    if mc.reg == "state-independent":
        return StateIndependent(beta=mc.beta, cap=mc.cap)
    if mc.reg == "state-dependent":
        return StateDependent(beta=mc.beta, cap=mc.cap)
    if mc.reg == "eigenvalue":
        return Eigenvalue(beta=mc.beta, eps=mc.eps)
    raise CliError(EXIT_USAGE, f"unknown --reg {mc.reg!r}; valid: constant, state-independent, "
                               "state-dependent, eigenvalue")


def _field_kw(cfg: RunConfig) -> dict:
    mc = cfg.model
    if mc.mode not in ("contractive", "unconstrained"):
        raise CliError(EXIT_USAGE, "--mode must be 'contractive' or 'unconstrained'")
    return dict(hidden=tuple(mc.hidden), activation=mc.activation, reg=_strategy(mc), mode=mc.mode,
                skew=mc.skew, seed=cfg.seed, quad_scheme=mc.quad_scheme, n_nodes=mc.quad_nodes)


def _history_csv(header: str, rows: list[dict], keys: list[str]) -> str:
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(str(r[k]) if k == "epoch" else _fmt(r[k]) for k in keys))
    return header + "\n".join(lines) + "\n"


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    inputs = input_hashes([args.data])
    if cfg.train.cond and ds.cond_dim == 0:
        raise CliError(EXIT_USAGE, "--cond needs a dataset whose demos carry conditions")
    if not cfg.train.cond and ds.cond_dim:
        ds = TrajectoryDataset([dio.Demo(d.dt, d.states) for d in ds.demos], ds.layout, ds.provenance)
    if cfg.train.anchor not in ("mean", "target"):
        raise CliError(EXIT_USAGE, "--anchor must be 'mean' or 'target'")
    out = Path(cfg.output.out or "model.json")
    hist_path = Path(cfg.output.history) if cfg.output.history else out.with_name("history.csv")
    kw = _field_kw(cfg)
    tc = TrainConfig(lr=cfg.train.lr, epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
                     seed=cfg.seed, anchor=cfg.train.anchor)
    vae = None
    try:
        if cfg.train.latent is not None:
            if cfg.train.latent >= ds.dim:
                raise CliError(EXIT_USAGE, f"--latent must be below the data dimension {ds.dim}")
            vc = cfg.vae
            vae_kw = dict(n_layers=vc.n_layers, coupling=vc.coupling, hidden=tuple(vc.hidden),
                          obs_std=vc.obs_std, seed=cfg.seed)
            res = latent_train_pipeline(ds, VaeTrainConfig(vc.lr, vc.epochs, vc.batch_size, cfg.seed), tc,
                                        cfg.train.latent, vae_kw, kw)
            model, hist, vae = res.ncds, res.ncds_history, res.vae
            vh = res.vae_history
        else:
            model = Ncds.build(ds.dim, cond_dim=ds.cond_dim if cfg.train.cond else 0, **kw)
            model, hist = train(model, ds, tc)
    except (TrainingError, VaeTrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRAIN
    obj = {"format": RUN_FORMAT, "version": 1, "config": cfg.to_dict(), "inputs": inputs,
           "ncds": model.to_dict(), "vae": vae.to_dict() if vae is not None else None}
    write_json(out, obj)
    header = csv_header("train", cfg, inputs)
    _write(hist_path, _history_csv(header, hist, ["epoch", "loss", "vel", "reg"]))
    if vae is not None:
        vae_obj = dict(vae.to_dict(), run_config=cfg.to_dict(), inputs=inputs)
        write_json(out.with_name("vae.json"), vae_obj)
        _write(out.with_name("vae_history.csv"), _history_csv(header, vh, ["epoch", "elbo", "recon_mse"]))
    if hist:
        print(f"final L_vel = {hist[-1]['vel']!r}")
    else:
        print("final L_vel = n/a (0 epochs)")
    return 0


def _starts(cfg: RunConfig, model: Ncds, vae, ds: TrajectoryDataset | None) -> tuple[np.ndarray, list]:
    """Start states in model coordinates, with a condition per start."""
    if cfg.eval.start:
        S = np.asarray(cfg.eval.start, dtype=float)
        conds = [cfg.eval.cond] * len(S)
        if vae is not None and S.shape[1] == vae.D:
            S = np.asarray(vae.encode_mean(S))
    elif ds is not None:
        S = np.array([d.states[0] for d in ds.demos])
        if vae is not None:
            S = np.asarray(vae.encode_mean(S))
        conds = [cfg.eval.cond if cfg.eval.cond is not None
                 else (None if d.condition is None else d.condition.tolist()) for d in ds.demos]
    else:
        raise CliError(EXIT_USAGE, "give --start or --data to choose start states")
    if S.ndim != 2 or S.shape[1] != model.dim:
        raise CliError(EXIT_USAGE, f"start states must have dimension {model.dim}")
    if model.cond_dim and any(c is None for c in conds):
        raise CliError(EXIT_USAGE, "conditional model: pass --cond or a dataset with conditions")
    return S, conds


def _timing(cfg: RunConfig, ds):
    dt = cfg.eval.dt if cfg.eval.dt is not None else (ds.demos[0].dt if ds is not None else 0.01)
    steps = cfg.eval.steps if cfg.eval.steps is not None else (len(ds.demos[0].states) - 1 if ds is not None else 1000)
    if not dt > 0 or steps < 1:
        raise CliError(EXIT_USAGE, "need dt > 0 and steps >= 1")
    return dt, steps


def _run_rollouts(model, starts, conds, dt, steps, modulator=None):
    out = []
    for x, c in zip(starts, conds):
        out.append(model.rollout(x, dt, steps, cond=c if model.cond_dim else None, modulator=modulator))
    return out


def _rollouts_csv(header: str, rolls, vae=None) -> str:
    d = rolls[0].states.shape[1]
    cols = ["traj", "t"] + [f"s{i + 1}" for i in range(d)]
    if vae is not None:
        cols += [f"a{i + 1}" for i in range(vae.D)]
    lines = [",".join(cols)]
    for k, r in enumerate(rolls):
        amb = np.asarray(vae.decode(r.states)) if vae is not None else None
        for j, (t, row) in enumerate(zip(r.times, r.states)):
            vals = [str(k), _fmt(t)] + [_fmt(v) for v in row]
            if amb is not None:
                vals += [_fmt(v) for v in amb[j]]
            lines.append(",".join(vals))
    return header + "\n".join(lines) + "\n"


def cmd_rollout(args, cfg: RunConfig) -> int:
    model, vae = _load_model(args.model)
    ds = _load_dataset(args.data) if args.data else None
    inputs = input_hashes([args.model, args.data])
    starts, conds = _starts(cfg, model, vae, ds)
    dt, steps = _timing(cfg, ds)
    rolls = _run_rollouts(model, starts, conds, dt, steps)
    out = cfg.output.out or "rollout.csv"
    _write(out, _rollouts_csv(csv_header("rollout", cfg, inputs), rolls, vae))
    if any(r.diverged for r in rolls):
        print(f"error: {sum(r.diverged for r in rolls)} rollout(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out}: {len(rolls)} trajectories")
    return 0


def _default_bounds(model: Ncds, vae, ds, pad: float = 0.1) -> list[float]:
    if ds is None:
        return [-1.0, 1.0, -1.0, 1.0]
    P = ds.all_states()
    if vae is not None:
        P = np.asarray(vae.encode_mean(P))
    lo, hi = P[:, :2].min(axis=0), P[:, :2].max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad * span, hi + pad * span
    return [float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])]


def _bounds(values, name: str) -> np.ndarray:
    b = np.asarray(values, dtype=float)
    if b.size != 4 or not (b[0] < b[1] and b[2] < b[3]):
        raise CliError(EXIT_USAGE, f"--{name} needs x_lo,x_hi,y_lo,y_hi with lo < hi")
    return b.reshape(2, 2)


def _svg_field(grid: dict, bounds: np.ndarray, ds_pts: list | None, hull=None, size: int = 600) -> str:
    (x0, x1), (y0, y1) = bounds

    def px(p):
        return (size * (p[0] - x0) / (x1 - x0), size * (1.0 - (p[1] - y0) / (y1 - y0)))

    res = grid["res"]
    P, V = grid["points"][:, :2], grid["velocities"][:, :2]
    speed = np.linalg.norm(V, axis=1)
    cell = 0.8 * min(x1 - x0, y1 - y0) / max(res, 1)
    scale = cell / speed.max() if speed.max() > 0 else 0.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    if hull is not None:
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (px(v) for v in hull.vertices))
        parts.append(f'<polygon class="hull" points="{pts}" fill="#ddd" stroke="none"/>')
    for demo in ds_pts or []:
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (px(v) for v in demo))
        parts.append(f'<polyline class="demo" points="{pts}" fill="none" stroke="#c33" stroke-width="1.5"/>')
    for p, v in zip(P, V):
        a = px(p)
        b = px(p + scale * v)
        d = np.array([b[0] - a[0], b[1] - a[1]])
        L = np.linalg.norm(d)
        head = ""
        if L > 1e-9:
            u = d / L
            w = np.array([-u[1], u[0]])
            h1 = np.array(b) - 0.3 * L * u + 0.15 * L * w
            h2 = np.array(b) - 0.3 * L * u - 0.15 * L * w
            head = f" M{h1[0]:.2f},{h1[1]:.2f} L{b[0]:.2f},{b[1]:.2f} L{h2[0]:.2f},{h2[1]:.2f}"
        parts.append(f'<path class="arrow" d="M{a[0]:.2f},{a[1]:.2f} L{b[0]:.2f},{b[1]:.2f}{head}" '
                     f'stroke="#236" fill="none"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_field(args, cfg: RunConfig) -> int:
    model, vae = _load_model(args.model)
    ds = _load_dataset(args.data) if args.data else None
    inputs = input_hashes([args.model, args.data])
    bounds = _bounds(cfg.eval.bounds or _default_bounds(model, vae, ds), "bounds")
    res = cfg.eval.res
    if res < 1:
        raise CliError(EXIT_USAGE, "--res must be positive")
    cond = cfg.eval.cond
    if model.cond_dim and cond is None:
        raise CliError(EXIT_USAGE, "conditional model: pass --cond")
    grid = model.velocity_field_grid(bounds, res, cond=cond if model.cond_dim else None, base=model.x0)
    out = cfg.output.out
    if cfg.output.format == "svg":
        demos = hull = None
        if ds is not None:
            demos = [np.asarray(vae.encode_mean(d.states)) if vae is not None else d.states for d in ds.demos]
            pts = np.concatenate(demos)[:, :2]
            try:
                hull = hull_region(pts)
            except ValueError:
                hull = None
        svg = _svg_field(grid, bounds, demos, hull)
        cfg_comment = json.dumps(cfg.to_dict(), separators=(",", ":")).replace("--", "- -")
        svg = svg.replace("<rect", f"<!-- config: {cfg_comment} inputs: {json.dumps(inputs)} -->\n<rect", 1)
        out = out or "field.svg"
        _write(out, svg)
    elif cfg.output.format == "csv":
        cols = ["x", "y"] + [f"v{i + 1}" for i in range(model.dim)]
        lines = [",".join(cols)]
        for p, v in zip(grid["points"], grid["velocities"]):
            lines.append(",".join([_fmt(p[0]), _fmt(p[1])] + [_fmt(a) for a in v]))
        out = out or "field.csv"
        _write(out, csv_header("field", cfg, inputs) + "\n".join(lines) + "\n")
    else:
        raise CliError(EXIT_USAGE, "--format must be csv or svg")
    print(f"wrote {out}: {res * res} grid cells")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, vae = _load_model(args.model)
    ds = _load_dataset(args.data)
    inputs = input_hashes([args.model, args.data])
    ec = cfg.eval
    demos = [d.states for d in ds.demos]
    if vae is not None:
        demos = [np.asarray(vae.encode_mean(s)) for s in demos]
    starts = np.array([s[0] for s in demos])
    conds = [ec.cond if ec.cond is not None else (None if d.condition is None else d.condition.tolist())
             for d in ds.demos]
    if model.cond_dim and any(c is None for c in conds):
        raise CliError(EXIT_USAGE, "conditional model: pass --cond or a dataset with conditions")
    rep = EvalReport(metadata={"config": cfg.to_dict(), "inputs": inputs, "space": "latent" if vae else "state"})
    diverged = 0
    rolls = []
    for s, c, d in zip(demos, conds, ds.demos):
        dt = ec.dt if ec.dt is not None else d.dt
        steps = ec.steps if ec.steps is not None else len(s) - 1
        r = model.rollout(s[0], dt, steps, cond=c if model.cond_dim else None)
        diverged += r.diverged
        rolls.append(r)
        rep.dtwd.append(dtwd(r.states, s))
        rep.dtwd_baseline.append(dtwd(straight_line_baseline(s), s))
        rep.total_steps.append(len(r.states))
    if model.dim == 2:
        hull = hull_region(np.concatenate(demos), ec.hull_margin)
        rep.steps_in_region = [steps_in_region(r.states, hull) for r in rolls]
        rep.metadata["hull_margin"] = hull.margin
    bounds = _bounds(ec.bounds or _default_bounds(model, vae, ds), "bounds")
    cmaps = contraction_maps(model.field, bounds, ec.res, cond=conds[0] if model.cond_dim else None,
                             base=model.x0)
    rep.rate_max, rep.spread_max = cmaps["rate_max"], cmaps["spread_max"]
    rng = make_rng(cfg.seed)
    center = starts.mean(axis=0)
    pert = center + ec.start_spread * rng.standard_normal((max(ec.n_starts, 2), model.dim))
    dt0 = ec.dt if ec.dt is not None else ds.demos[0].dt
    steps0 = ec.steps if ec.steps is not None else len(demos[0]) - 1
    try:
        curve = model.pairwise_distance_curves(pert, dt0, steps0, cond=conds[0] if model.cond_dim else None)
        rep.monotone, rep.first_violation = monotonicity_report(curve)
    except Exception as e:  # divergence leaves the curve undefined
        diverged += 1
        rep.metadata["distance_curve_error"] = str(e)
    out = Path(cfg.output.out or "eval.json")
    write_json(out, rep.to_dict())
    _write(out.with_suffix(".csv"), csv_header("eval", cfg, inputs) + rep.to_csv())
    print(f"wrote {out}: dtwd per demo " + ", ".join(f"{v:.4g}" for v in rep.dtwd))
    if diverged:
        print(f"error: {diverged} rollout(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def _mean_speed(ds) -> float:
    if ds is None:
        return 1.0
    V = np.concatenate(dio.estimate_velocities(ds))
    return float(np.mean(np.linalg.norm(V, axis=1)))


def cmd_modulate(args, cfg: RunConfig) -> int:
    model, vae = _load_model(args.model)
    ds = _load_dataset(args.data) if args.data else None
    mc = cfg.modulation
    paths = [args.model, args.data, mc.field]
    inputs = input_hashes(paths)
    if (mc.obstacle is None) == (mc.field is None):
        raise CliError(EXIT_USAGE, "give exactly one of --obstacle or --field")
    if mc.obstacle is not None:
        ob = np.asarray(mc.obstacle, dtype=float)
        if ob.size != model.dim + 1:
            raise CliError(EXIT_USAGE, f"--obstacle needs {model.dim} center coordinates and a radius")
        try:
            mod = ClassicalModulator(SphereObstacle(ob[:-1], float(ob[-1]), reactivity=mc.reactivity))
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"--obstacle: {e}") from e
    else:
        if model.dim != 2:
            raise CliError(EXIT_USAGE, "distance-field modulation needs a 2-D model space")
        try:
            grid = DistanceFieldGrid.from_dict(json.loads(_read_bytes(mc.field)))
        except (ValueError, KeyError) as e:
            raise CliError(EXIT_IO, f"{mc.field}: not a distance-field file ({e})") from e
        try:
            xp = XiParams(rho_imp=mc.rho_imp, nu=mc.nu, k=mc.k)
        except ValueError as e:
            raise CliError(EXIT_USAGE, str(e)) from e
        speed = _mean_speed(ds)
        if vae is not None and ds is not None:
            lat = [np.asarray(vae.encode_mean(d.states)) for d in ds.demos]
            V = np.concatenate([np.gradient(z, d.dt, axis=0) for z, d in zip(lat, ds.demos)])
            speed = float(np.mean(np.linalg.norm(V, axis=1)))
        mod = RiemannianModulator(grid, xp, sigma_beta=mc.sigma_beta_scale * speed, target=model.x0)
    starts, conds = _starts(cfg, model, vae, ds)
    dt, steps = _timing(cfg, ds)
    rolls = _run_rollouts(model, starts, conds, dt, steps, modulator=mod)
    out = cfg.output.out or "modulated.csv"
    _write(out, _rollouts_csv(csv_header("modulate", cfg, inputs), rolls, vae))
    if any(r.diverged for r in rolls):
        print(f"error: {sum(r.diverged for r in rolls)} rollout(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out}: {len(rolls)} modulated trajectories")
    return 0


def _boundary_samples(circle) -> np.ndarray:
    c = np.asarray(circle, dtype=float)
    if c.size != 4 or not c[2] > 0 or c[3] < 1:
        raise CliError(EXIT_USAGE, "--boundary-circle needs cx,cy,r,n with r > 0 and n >= 1")
    n = int(c[3])
    th = 2.0 * np.pi * (np.arange(n) + 0.5) / n
    return c[:2] + c[2] * np.stack([np.cos(th), np.sin(th)], axis=1)


def cmd_calibrate_alpha(args, cfg: RunConfig) -> int:
    mc = cfg.modulation
    inputs = input_hashes([mc.field, args.model])
    try:
        xp = XiParams(rho_imp=mc.rho_imp, nu=mc.nu, k=mc.k)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from e
    inside_fn = None
    if mc.field is not None:
        try:
            grid = DistanceFieldGrid.from_dict(json.loads(_read_bytes(mc.field)))
        except (ValueError, KeyError) as e:
            raise CliError(EXIT_IO, f"{mc.field}: not a distance-field file ({e})") from e
        if mc.boundary_circle is None:
            raise CliError(EXIT_USAGE, "recalibration needs --boundary-circle")
        Zb = _boundary_samples(mc.boundary_circle)
        grid = recalibrate(grid, Zb, mc.rho_imp)
    else:
        if mc.bump is None:
            raise CliError(EXIT_USAGE, "building a field needs --bump (and --model for a pullback metric)")
        bump = np.asarray(mc.bump, dtype=float)
        center, radius, weight = bump[:-2], float(bump[-2]), float(bump[-1])
        if args.model:
            _, vae = _load_model(args.model)
            if vae is None:
                raise CliError(EXIT_USAGE, "--model must contain a VAE for the pullback metric")
            if vae.d != 2:
                raise CliError(EXIT_USAGE, "distance fields need a 2-D latent space")
            amb = AmbientMetric(weight, center, radius, position=(0, center.size))

            def metric(z):
                return pullback_metric(vae, z, amb)
            if mc.boundary_circle is None:
                raise CliError(EXIT_USAGE, "pullback calibration needs --boundary-circle in latent coordinates")
        else:
            if center.size != 2:
                raise CliError(EXIT_USAGE, "a latent bump needs a 2-D center")

            def metric(z):
                f = 1.0 + weight * np.exp(-np.sum((z - center) ** 2) / (2.0 * radius ** 2))
                return f * np.eye(2)

            def inside_fn(z):
                return np.linalg.norm(z - center) < radius
        circle = mc.boundary_circle if mc.boundary_circle is not None else [center[0], center[1], radius, 32]
        Zb = _boundary_samples(circle)
        bounds = _bounds(mc.bounds or [-1.0, 1.0, -1.0, 1.0], "grid-bounds")
        try:
            grid = build_distance_field(metric, bounds, mc.res, mc.rho_imp, Zb)
        except ValueError as e:
            raise CliError(EXIT_USAGE, str(e)) from e
    rep = calibration_report(grid, xp, inside_fn)
    rep["median_boundary_value"] = float(np.median(grid.value(Zb)))
    obj = dict(grid.to_dict(), config=cfg.to_dict(), inputs=inputs, calibration=rep)
    out = cfg.output.out or "field.json"
    write_json(out, obj)
    print(f"wrote {out}: alpha={grid.alpha!r} median boundary value={rep['median_boundary_value']:.4g}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "field": cmd_field,
    "eval": cmd_eval,
    "modulate": cmd_modulate,
    "calibrate-alpha": cmd_calibrate_alpha,
}


def _thread_limit():
    raw = os.environ.get("CONTRAFLOW_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_USAGE, "CONTRAFLOW_THREADS must be a positive integer")
    if n < 1:
        raise CliError(EXIT_USAGE, "CONTRAFLOW_THREADS must be a positive integer")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = effective_config(args)
        n = _thread_limit()
        if n is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=n):
                return COMMANDS[args.command](args, cfg)
        return COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
