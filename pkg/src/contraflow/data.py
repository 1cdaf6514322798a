"""Trajectory datasets: schema I/O, preprocessing, stacking, synthetic shapes.

File schema (JSON)::

    {"version": 1, "dim": D,
     "layout": [{"kind": "position" | "so3" | "plain", "span": k}, ...],
     "demos": [{"dt": float, "states": [[...], ...], "condition": [...]?}, ...],
     "provenance": [str, ...]?}

Floats are written with Python's shortest round-trip repr, so a
save/load cycle is bit exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lie import so3_exp, so3_log
from .numerics.rng import make_rng

LAYOUT_KINDS = ("position", "so3", "plain")
SHAPES = ("sine", "angle", "line", "sharpc", "multimodal")


class SchemaError(ValueError):
    """Dataset file does not match the schema; message starts with a JSON pointer."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class TooShortError(ValueError):
    pass


@dataclass
class Demo:
    dt: float
    states: np.ndarray  # (T, D)
    condition: np.ndarray | None = None

    def __post_init__(self):
        self.dt = float(self.dt)
        self.states = np.asarray(self.states, dtype=float)
        if self.condition is not None:
            self.condition = np.asarray(self.condition, dtype=float).reshape(-1)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))


@dataclass
class TrajectoryDataset:
    demos: list[Demo]
    layout: list[tuple[str, int]] | None = None
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.demos:
            raise ValueError("a dataset needs at least one demonstration")
        if self.layout is None:
            self.layout = [("plain", self.dim)]
        self.layout = [(str(k), int(s)) for k, s in self.layout]
        self.validate()

    @property
    def dim(self) -> int:
        return int(self.demos[0].states.shape[1])

    @property
    def cond_dim(self) -> int:
        c = self.demos[0].condition
        return 0 if c is None else int(c.size)

    def validate(self) -> None:
        D = self.dim
        if sum(s for _, s in self.layout) != D:
            raise ValueError("layout spans do not add up to the state dimension")
        for kind, _ in self.layout:
            if kind not in LAYOUT_KINDS:
                raise ValueError(f"unknown layout kind {kind!r}")
        for i, d in enumerate(self.demos):
            if d.states.ndim != 2 or d.states.shape[1] != D:
                raise ValueError(f"demo {i} has state shape {d.states.shape}, expected (T, {D})")
            if not d.dt > 0:
                raise ValueError(f"demo {i} has non-positive dt")
            if (d.condition is None) != (self.demos[0].condition is None):
                raise ValueError("either all demos carry a condition or none does")
            if d.condition is not None and d.condition.size != self.cond_dim:
                raise ValueError(f"demo {i} has condition size {d.condition.size}, expected {self.cond_dim}")

    def spans(self, kind: str) -> list[slice]:
        out, start = [], 0
        for k, s in self.layout:
            if k == kind:
                out.append(slice(start, start + s))
            start += s
        return out

    def all_states(self) -> np.ndarray:
        return np.concatenate([d.states for d in self.demos], axis=0)

    def training_arrays(self):
        """(X, Xdot, C) stacked over demos; C is None without conditions."""
        vel = estimate_velocities(self)
        X = np.concatenate([d.states for d in self.demos])
        Xd = np.concatenate(vel)
        C = None
        if self.cond_dim:
            C = np.concatenate([np.tile(d.condition, (len(d.states), 1)) for d in self.demos])
        return X, Xd, C

    def with_provenance(self, entry: str) -> "TrajectoryDataset":
        return TrajectoryDataset(self.demos, self.layout, self.provenance + [entry])


# --- serialization ------------------------------------------------------------

def to_json_dict(ds: TrajectoryDataset) -> dict:
    demos = []
    for d in ds.demos:
        rec = {"dt": d.dt, "states": d.states.tolist()}
        if d.condition is not None:
            rec["condition"] = d.condition.tolist()
        demos.append(rec)
    out = {
        "version": 1,
        "dim": ds.dim,
        "layout": [{"kind": k, "span": s} for k, s in ds.layout],
        "demos": demos,
    }
    if ds.provenance:
        out["provenance"] = list(ds.provenance)
    return out


def _require(obj: dict, key: str, pointer: str):
    if not isinstance(obj, dict):
        raise SchemaError(pointer, "expected an object")
    if key not in obj:
        raise SchemaError(f"{pointer}/{key}", f"missing required field '{key}'")
    return obj[key]


def _number_matrix(value, pointer: str) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise SchemaError(pointer, "expected a non-empty list of rows")
    width = None
    for i, row in enumerate(value):
        if not isinstance(row, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
            raise SchemaError(f"{pointer}/{i}", "expected a list of numbers")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise SchemaError(f"{pointer}/{i}", f"row has {len(row)} entries, expected {width}")
    return np.asarray(value, dtype=float)


def from_json_dict(obj) -> TrajectoryDataset:
    if not isinstance(obj, dict):
        raise SchemaError("", "expected a JSON object")
    allowed = {"version", "dim", "layout", "demos", "provenance"}
    for k in obj:
        if k not in allowed:
            raise SchemaError(f"/{k}", "unknown field")
    if _require(obj, "version", "") != 1:
        raise SchemaError("/version", "unsupported version (expected 1)")
    dim = _require(obj, "dim", "")
    if not isinstance(dim, int) or dim < 1:
        raise SchemaError("/dim", "expected a positive integer")
    layout_raw = _require(obj, "layout", "")
    if not isinstance(layout_raw, list) or not layout_raw:
        raise SchemaError("/layout", "expected a non-empty list")
    layout = []
    for i, ent in enumerate(layout_raw):
        kind = _require(ent, "kind", f"/layout/{i}")
        span = _require(ent, "span", f"/layout/{i}")
        if kind not in LAYOUT_KINDS:
            raise SchemaError(f"/layout/{i}/kind", f"expected one of {LAYOUT_KINDS}")
        if not isinstance(span, int) or span < 1:
            raise SchemaError(f"/layout/{i}/span", "expected a positive integer")
        layout.append((kind, span))
    if sum(s for _, s in layout) != dim:
        raise SchemaError("/layout", f"spans sum to {sum(s for _, s in layout)}, dim is {dim}")
    demos_raw = _require(obj, "demos", "")
    if not isinstance(demos_raw, list) or not demos_raw:
        raise SchemaError("/demos", "expected a non-empty list")
    demos = []
    has_cond = None
    for i, d in enumerate(demos_raw):
        p = f"/demos/{i}"
        dt = _require(d, "dt", p)
        if not isinstance(dt, (int, float)) or isinstance(dt, bool) or not dt > 0:
            raise SchemaError(f"{p}/dt", "expected a positive number")
        states = _number_matrix(_require(d, "states", p), f"{p}/states")
        if states.shape[1] != dim:
            raise SchemaError(f"{p}/states", f"state dimension {states.shape[1]} differs from dim {dim}")
        cond = d.get("condition")
        if has_cond is None:
            has_cond = cond is not None
        elif has_cond != (cond is not None):
            raise SchemaError(f"{p}/condition", "either every demo has a condition or none does")
        if cond is not None:
            if not isinstance(cond, list) or not all(isinstance(v, (int, float)) for v in cond):
                raise SchemaError(f"{p}/condition", "expected a list of numbers")
            if demos and len(cond) != demos[0].condition.size:
                raise SchemaError(f"{p}/condition", "condition length differs between demos")
        for k in d:
            if k not in ("dt", "states", "condition"):
                raise SchemaError(f"{p}/{k}", "unknown field")
        demos.append(Demo(float(dt), states, None if cond is None else np.asarray(cond, dtype=float)))
    prov = obj.get("provenance", [])
    if not isinstance(prov, list) or not all(isinstance(s, str) for s in prov):
        raise SchemaError("/provenance", "expected a list of strings")
    return TrajectoryDataset(demos, layout, list(prov))


def dumps(ds: TrajectoryDataset) -> str:
    return json.dumps(to_json_dict(ds), indent=1)


def save(path, ds: TrajectoryDataset) -> None:
    Path(path).write_text(dumps(ds) + "\n")


def load(path) -> TrajectoryDataset:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("", f"invalid JSON: {e}") from e
    return from_json_dict(obj)


def to_csv(ds: TrajectoryDataset) -> str:
    """Rows ``demo,t,s1..sD`` for plotting tools."""
    head = "demo,t," + ",".join(f"s{i + 1}" for i in range(ds.dim))
    lines = [head]
    for k, d in enumerate(ds.demos):
        for t, row in zip(d.times, d.states):
            lines.append(",".join([str(k), repr(float(t))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


# --- preprocessing ----------------------------------------------------------------

def estimate_velocities(ds: TrajectoryDataset) -> list[np.ndarray]:
    """Central differences inside, one-sided at the ends, final sample zeroed."""
    out = []
    for i, d in enumerate(ds.demos):
        if len(d.states) < 3:
            raise TooShortError(f"demo {i} has {len(d.states)} samples; at least 3 are needed")
        v = np.gradient(d.states, d.dt, axis=0, edge_order=1)
        v[-1] = 0.0
        out.append(v)
    return out


def _resample_arclength(states: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(states, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0.0:
        return np.repeat(states[:1], n, axis=0)
    targets = np.linspace(0.0, s[-1], n)
    targets[-1] = s[-1]
    out = np.stack([np.interp(targets, s, states[:, j]) for j in range(states.shape[1])], axis=1)
    out[0], out[-1] = states[0], states[-1]
    return out


def preprocess(ds: TrajectoryDataset, trim_head: int = 0, align_target: bool = True,
               resample_n: int | None = None) -> TrajectoryDataset:
    if trim_head < 0 or trim_head >= min(len(d.states) for d in ds.demos):
        raise ValueError("trim_head must be smaller than the shortest demo")
    demos = []
    for d in ds.demos:
        x = d.states[trim_head:]
        dt = d.dt
        if align_target:
            x = x - x[-1]
        if resample_n is not None:
            # keep the demo duration; the time step follows the new count
            duration = dt * (len(x) - 1)
            x = _resample_arclength(x, int(resample_n))
            dt = duration / (int(resample_n) - 1)
        demos.append(Demo(dt, x.copy(), d.condition))
    entry = f"preprocess(trim_head={trim_head}, align_target={align_target}, resample_n={resample_n})"
    return TrajectoryDataset(demos, ds.layout, ds.provenance + [entry])


def stack(a: TrajectoryDataset, b: TrajectoryDataset) -> TrajectoryDataset:
    """Column-wise concatenation of paired demos (4-D / 8-D stacked sets)."""
    if len(a.demos) != len(b.demos):
        raise ValueError(f"demo counts differ: {len(a.demos)} vs {len(b.demos)}")
    demos = []
    for i, (da, db) in enumerate(zip(a.demos, b.demos)):
        if len(da.states) != len(db.states):
            raise ValueError(f"demo {i} lengths differ: {len(da.states)} vs {len(db.states)}")
        if not np.isclose(da.dt, db.dt, rtol=1e-12, atol=0.0):
            raise ValueError(f"demo {i} time steps differ: {da.dt} vs {db.dt}")
        demos.append(Demo(da.dt, np.concatenate([da.states, db.states], axis=1), da.condition))
    entry = f"stack(dim {a.dim} + dim {b.dim})"
    return TrajectoryDataset(demos, list(a.layout) + list(b.layout), a.provenance + b.provenance + [entry])


def with_condition(ds: TrajectoryDataset, cond) -> TrajectoryDataset:
    cond = np.atleast_1d(np.asarray(cond, dtype=float))
    return TrajectoryDataset([Demo(d.dt, d.states, cond) for d in ds.demos], ds.layout,
                             ds.provenance + [f"condition={cond.tolist()}"])


def concat_datasets(*parts: TrajectoryDataset) -> TrajectoryDataset:
    demos = [d for p in parts for d in p.demos]
    prov = [e for p in parts for e in p.provenance] + [f"concat({len(parts)} datasets)"]
    return TrajectoryDataset(demos, parts[0].layout, prov)


# --- synthetic shapes ----------------------------------------------------------------

T_START, T_END = 1.0, 7.0


def _progress(n: int) -> tuple[np.ndarray, float]:
    """Normalized progress s in [0, 1] of a critically damped approach.

    The raw profile 1 - (1 + t) e^{-t} starts at rest; beginning at T_START
    plays the role of trimmed head samples, so the speed is positive
    everywhere except at the target.
    """
    t = np.linspace(T_START, T_END, n)
    phi = 1.0 - (1.0 + t) * np.exp(-t)
    s = (phi - phi[0]) / (phi[-1] - phi[0])
    s[-1] = 1.0
    return s, (T_END - T_START) / (n - 1)


def _bezier2(p0, c, s):
    p0, c = np.asarray(p0, float), np.asarray(c, float)
    u = 1.0 - s[:, None]
    return u * u * p0 + 2.0 * s[:, None] * u * c


def _shape_path(name: str, s: np.ndarray, mode: int = 0) -> np.ndarray:
    u = 1.0 - s
    if name == "line":
        return u[:, None] * np.array([-1.0, 0.6])
    if name == "sine":
        return np.stack([-u, 0.12 * np.sin(2.0 * np.pi * u)], axis=1)
    if name == "angle":
        return _bezier2([-0.8, 0.9], [-0.75, 0.15], s)
    if name == "sharpc":
        th = 0.5 * np.pi + np.pi * s
        return u[:, None] * np.stack([np.cos(th), np.sin(th)], axis=1)
    if name == "multimodal":
        if mode == 0:
            return _bezier2([-1.0, 0.5], [-0.3, 0.6], s)
        return _bezier2([0.8, -0.8], [0.7, -0.1], s)
    raise ValueError(f"unknown shape {name!r}; valid names: {', '.join(SHAPES)}")


def synth_shapes(name: str, n_demos: int = 5, n_points: int = 200, noise: float = 0.05,
                 seed: int = 0) -> TrajectoryDataset:
    """Parametric 2-D curves ending at the origin, jittered per demo.

    Demo k follows p(s) + (1 - s) δ_k with δ_k ~ N(0, noise² I): the offset
    fades out towards the target, so every demo ends exactly at 0.
    """
    if name not in SHAPES:
        raise ValueError(f"unknown shape {name!r}; valid names: {', '.join(SHAPES)}")
    if n_points < 10:
        raise ValueError("n_points must be at least 10")
    if n_demos < 1:
        raise ValueError("n_demos must be positive")
    rng = make_rng(seed)
    s, dt = _progress(n_points)
    demos = []
    for k in range(n_demos):
        delta = noise * rng.standard_normal(2)
        path = _shape_path(name, s, mode=k % 2)
        x = path + (1.0 - s)[:, None] * delta
        x[-1] = 0.0
        demos.append(Demo(dt, x))
    prov = [f"synth_shapes(name={name}, n_demos={n_demos}, n_points={n_points}, noise={noise}, seed={seed})"]
    return TrajectoryDataset(demos, [("position", 2)], prov)


def synth_pose_dataset(base2d: TrajectoryDataset, scale: float = 1.0) -> TrajectoryDataset:
    """Lift 2-D demos to ℝ³ x so(3): position (x, y, 0), rotation r = scale (x, y, 0).

    Orientation is stored as Lie-algebra coefficients; every sample is
    checked to survive an Exp/Log round trip.
    """
    if base2d.dim != 2:
        raise ValueError("synth_pose_dataset needs a 2-D base dataset")
    limit = np.pi - 0.1
    demos = []
    for i, d in enumerate(base2d.demos):
        pos = np.concatenate([d.states, np.zeros((len(d.states), 1))], axis=1)
        r = scale * pos
        norms = np.linalg.norm(r, axis=1)
        bad = np.nonzero(norms >= limit)[0]
        if bad.size:
            from .lie import FirstCoverError
            raise FirstCoverError(f"demo {i}: samples {bad[:10].tolist()} have ‖r‖ ≥ π - 0.1")
        for rv in r:
            back = so3_log(so3_exp(rv))
            if np.max(np.abs(back - rv)) > 1e-9:
                raise ValueError(f"demo {i}: rotation coefficient failed the Exp/Log consistency check")
        demos.append(Demo(d.dt, np.concatenate([pos, r], axis=1), d.condition))
    return TrajectoryDataset(demos, [("position", 3), ("so3", 3)],
                             base2d.provenance + [f"synth_pose_dataset(scale={scale})"])
