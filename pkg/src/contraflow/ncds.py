"""The contractive dynamical system built from a Jacobian field.

    f(x) = v0 + ∫₀¹ Ĵ(x0 + t (x - x0)) (x - x0) dt

discretized with a fixed quadrature rule.  At x = x0 the straight path
collapses, f(x0) = v0 exactly and ∂f/∂x(x0) = Ĵ(x0).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .jacobian_field import JacobianField, strategy_from_dict
from .numerics import autodiff as ad
from .numerics.adam import AdamState, adam_step
from .numerics.autodiff import NumericError, ParamGraph
from .numerics.linalg import DimensionError
from .numerics.quadrature import quadrature_nodes
from .numerics.rng import make_rng

DIVERGENCE_NORM = 1e6
FORMAT = "contraflow.ncds"


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"training aborted at epoch {epoch}: {message}")
        self.epoch = epoch


class Modulator(Protocol):
    def apply(self, x: np.ndarray, v: np.ndarray) -> np.ndarray: ...


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 1000
    batch_size: int | None = None  # None: full batch
    beta: float | None = None  # overrides the strategy's β when set
    seed: int = 0
    quad_nodes: int | None = None  # training-time override of the model's node count
    anchor: str = "mean"  # "mean": x0 <- data mean, learnable; "target": x0 <- demo end, v0 = 0, frozen
    log_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.anchor not in ("mean", "target"):
            raise ValueError("anchor must be 'mean' or 'target'")


@dataclass
class Rollout:
    times: np.ndarray
    states: np.ndarray  # (T+1, D)
    modulated: bool = False
    diverged: bool = False


class Ncds:
    def __init__(self, field: JacobianField, quad_scheme: str = "gauss_legendre", n_nodes: int = 16):
        self.field = field
        self.store = field.store
        self.dim = field.dim
        self.cond_dim = field.cond_dim
        self.quad_scheme = quad_scheme
        self.n_nodes = int(n_nodes)
        self.nodes, self.weights = quadrature_nodes(quad_scheme, self.n_nodes)
        if "x0" not in self.store:
            self.store.add("x0", np.zeros(self.dim))
            self.store.add("v0", np.zeros(self.dim))

    @classmethod
    def build(cls, dim: int, cond_dim: int = 0, quad_scheme="gauss_legendre", n_nodes=16, **field_kw) -> "Ncds":
        return cls(JacobianField(dim, cond_dim, **field_kw), quad_scheme, n_nodes)

    @property
    def x0(self) -> np.ndarray:
        return self.store.get("x0")

    @property
    def v0(self) -> np.ndarray:
        return self.store.get("v0")

    # ------------------------------------------------------------------ velocity
    def velocity(self, x, cond=None, params=None, nodes=None):
        """f(x) for one state (D,) or a batch (N, D)."""
        P = self.store.arrays() if params is None else params
        t, w = (self.nodes, self.weights) if nodes is None else nodes
        xv = np.asarray(ad.value_of(x), dtype=float)
        if xv.shape[-1] != self.dim:
            raise DimensionError(f"state has dimension {xv.shape[-1]}, model expects {self.dim}")
        single = xv.ndim == 1
        X = ad.reshape(x, (1, self.dim)) if single else x
        N = np.shape(ad.value_of(X))[0]
        K, D = len(t), self.dim
        x0, v0 = P["x0"], P["v0"]
        dx = X - x0  # (N, D)
        pts = x0 + ad.reshape(dx, (1, N, D)) * t[:, None, None]  # (K, N, D)
        C = None
        if self.cond_dim:
            if cond is None:
                raise DimensionError("conditional model needs a condition")
            cond = np.asarray(cond, dtype=float)
            C = np.broadcast_to(cond.reshape(-1, self.cond_dim), (N, self.cond_dim))
            C = np.broadcast_to(C[None], (K, N, self.cond_dim)).reshape(K * N, self.cond_dim)
        J = self.field.full_jacobian(ad.reshape(pts, (K * N, D)), C, P)
        J = ad.reshape(J, (K, N, D, D))
        integrand = ad.reshape(J @ ad.reshape(dx, (1, N, D, 1)), (K, N, D))
        v = v0 + ad.vsum(integrand * w[:, None, None], axis=0)
        out = ad.reshape(v, (D,)) if single else v
        if params is None and not np.isfinite(out).all():
            raise NumericError("non-finite velocity from the Jacobian field")
        return out

    def velocity_loss(self, X, Xd, C=None, params=None, nodes=None):
        """(1/N) Σ ‖ẋ_i - f(x_i)‖²."""
        pred = self.velocity(X, C, params, nodes)
        r = pred - Xd
        return ad.vmean(ad.vsum(ad.square(r), axis=-1))

    # ------------------------------------------------------------------ rollout
    def _integrate(self, X0: np.ndarray, dt: float, steps: int, cond=None, modulator=None):
        if not dt > 0:
            raise ValueError("dt must be positive")
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        B, D = X0.shape
        states = np.full((B, steps + 1, D), np.nan)
        states[:, 0] = X0
        alive = np.ones(B, dtype=bool)
        last = np.full(B, steps)
        conds = None
        if self.cond_dim:
            conds = np.broadcast_to(np.asarray(cond, dtype=float).reshape(-1, self.cond_dim), (B, self.cond_dim))

        def f(Y, idx):
            c = None if conds is None else conds[idx]
            v = self.velocity(Y, c)
            if modulator is not None:
                v = modulator.apply(Y, v)
            return v

        x = X0.copy()
        for k in range(steps):
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            y = x[idx]
            with np.errstate(all="ignore"):
                try:
                    k1 = f(y, idx)
                    k2 = f(y + 0.5 * dt * k1, idx)
                    k3 = f(y + 0.5 * dt * k2, idx)
                    k4 = f(y + dt * k3, idx)
                    y_new = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                except NumericError:
                    y_new = np.full_like(y, np.inf)
            bad = ~np.isfinite(y_new).all(axis=1) | (np.linalg.norm(np.nan_to_num(y_new, nan=np.inf), axis=1) > DIVERGENCE_NORM)
            good = idx[~bad]
            x[good] = y_new[~bad]
            states[good, k + 1] = y_new[~bad]
            for j in idx[bad]:
                alive[j] = False
                last[j] = k
                yj = y_new[np.nonzero(idx == j)[0][0]]
                if np.isfinite(yj).all():
                    # keep the first out-of-bounds state as evidence
                    states[j, k + 1] = yj
                    last[j] = k + 1
        return states, ~alive, last

    def rollout(self, x_init, dt: float, steps: int, cond=None, modulator=None) -> Rollout:
        states, div, last = self._integrate(np.asarray(x_init, dtype=float)[None], dt, steps, cond, modulator)
        n = last[0] + 1
        return Rollout(dt * np.arange(n), states[0, :n], modulator is not None, bool(div[0]))

    def rollout_batch(self, starts, dt: float, steps: int, cond=None, modulator=None) -> list[Rollout]:
        states, div, last = self._integrate(starts, dt, steps, cond, modulator)
        out = []
        for b in range(states.shape[0]):
            n = last[b] + 1
            out.append(Rollout(dt * np.arange(n), states[b, :n], modulator is not None, bool(div[b])))
        return out

    def pairwise_distance_curves(self, starts, dt: float, steps: int, cond=None, modulator=None) -> np.ndarray:
        starts = np.asarray(starts, dtype=float)
        if len(starts) < 2:
            raise ValueError("need at least two starts")
        states, div, _ = self._integrate(starts, dt, steps, cond, modulator)
        if div.any():
            raise NumericError("a rollout diverged; distance curve undefined")
        k = len(starts)
        ia, ib = np.triu_indices(k, 1)
        d = np.linalg.norm(states[ia] - states[ib], axis=-1)  # (pairs, T+1)
        return d.mean(axis=0)

    def velocity_field_grid(self, bounds, res: int, cond=None, dims=(0, 1), base=None) -> dict:
        """Velocities on a res x res grid (x varies fastest)."""
        (lo0, hi0), (lo1, hi1) = np.asarray(bounds, dtype=float).reshape(2, 2)
        if res == 1:
            g0, g1 = np.array([0.5 * (lo0 + hi0)]), np.array([0.5 * (lo1 + hi1)])
        else:
            g0, g1 = np.linspace(lo0, hi0, res), np.linspace(lo1, hi1, res)
        A, B = np.meshgrid(g0, g1, indexing="xy")
        base = np.zeros(self.dim) if base is None else np.asarray(base, dtype=float)
        pts = np.tile(base, (A.size, 1))
        pts[:, dims[0]] = A.ravel()
        pts[:, dims[1]] = B.ravel()
        vel = self.velocity(pts, cond) if len(pts) else np.zeros((0, self.dim))
        return {"res": int(res), "points": pts, "velocities": vel}

    # ------------------------------------------------------------------ training
    def init_anchor(self, X: np.ndarray, ends: np.ndarray, how: str) -> None:
        if how == "mean":
            self.store.set("x0", X.mean(axis=0))
        else:
            self.store.set("x0", ends.mean(axis=0))
        self.store.set("v0", 0.0)

    def train(self, data, cfg: TrainConfig | None = None, callback: Callable | None = None):
        return train(self, data, cfg, callback)

    # ------------------------------------------------------------------ serialization
    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": 1,
            "field": self.field.config(),
            "quad": {"scheme": self.quad_scheme, "n_nodes": self.n_nodes},
            "params": params_to_dict(self.store),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Ncds":
        if obj.get("format") != FORMAT:
            raise ValueError("not a serialized NCDS model")
        fc = dict(obj["field"])
        fc["reg"] = strategy_from_dict(fc["reg"])
        fc["hidden"] = tuple(fc["hidden"])
        field = JacobianField(**fc)
        m = cls(field, obj["quad"]["scheme"], obj["quad"]["n_nodes"])
        params_from_dict(m.store, obj["params"])
        return m


def params_to_dict(store) -> dict:
    return {
        "names": store.names(),
        "shapes": [list(s) for s in store.shapes().values()],
        "values": [float(v).hex() for v in store.values],
    }


def params_from_dict(store, obj: dict) -> None:
    if list(obj["names"]) != store.names():
        raise ValueError("parameter layout does not match the model architecture")
    vals = np.array([float.fromhex(s) for s in obj["values"]])
    if vals.size != store.size:
        raise ValueError("parameter vector has the wrong length")
    store.values[:] = vals


def train(model: Ncds, data, cfg: TrainConfig | None = None, callback: Callable | None = None):
    """Adam on L_vel + L_reg.  Returns (model, history) with one record per epoch."""
    cfg = cfg or TrainConfig()
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history
    X, Xd, C = data.training_arrays()
    ends = np.array([d.states[-1] for d in data.demos])
    if model.cond_dim and C is None:
        raise DimensionError("conditional model needs a dataset with conditions")
    if X.shape[1] != model.dim:
        raise DimensionError(f"dataset dim {X.shape[1]} differs from model dim {model.dim}")
    model.init_anchor(X, ends, cfg.anchor)
    if cfg.beta is not None and hasattr(model.field.reg, "beta"):
        model.field.reg.beta = cfg.beta
    nodes = None
    if cfg.quad_nodes is not None:
        nodes = quadrature_nodes(model.quad_scheme, cfg.quad_nodes)
    store = model.store
    frozen = np.zeros(store.size, dtype=bool)
    if cfg.anchor == "target":
        frozen[store.slice_of("x0")] = True
        frozen[store.slice_of("v0")] = True
    opt = AdamState.init(store.size, cfg.lr)
    rng = make_rng(cfg.seed)
    N = len(X)
    bs = N if not cfg.batch_size else min(int(cfg.batch_size), N)
    for epoch in range(cfg.epochs):
        order = rng.permutation(N) if bs < N else np.arange(N)
        tot = vel = reg = 0.0
        for start in range(0, N, bs):
            b = order[start:start + bs]
            g = ParamGraph(store)
            Cb = None if C is None else C[b]
            lv = model.velocity_loss(X[b], Xd[b], Cb, g.params, nodes)
            lr_ = model.field.reg_loss(X[b], Cb, g.params)
            loss = lv + lr_
            lval = float(ad.value_of(loss))
            if not np.isfinite(lval):
                raise TrainingError(epoch)
            try:
                gr = ad.grad(g, loss)
            except NumericError as e:
                raise TrainingError(epoch, str(e)) from e
            gr[frozen] = 0.0
            new, opt = adam_step(store.values, gr, opt)
            store.values[:] = new
            model.field.project()
            w = len(b) / N
            tot += w * lval
            vel += w * float(ad.value_of(lv))
            reg += w * float(ad.value_of(lr_))
        rec = {"epoch": epoch, "loss": tot, "vel": vel, "reg": reg}
        history.append(rec)
        if callback is not None:
            callback(rec)
    return model, history
