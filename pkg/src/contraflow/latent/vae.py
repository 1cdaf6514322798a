"""Injective-flow VAE: decode = flows ∘ Pad, encode_mean = Unpad ∘ flows⁻¹.

Because the flows are exactly invertible, encode_mean(decode(z)) = z holds
for any parameter values, trained or not.  Points whose pre-flow extra
coordinates are nonzero lie off the decoder's manifold; the norm of those
coordinates is the off-manifold residual.

Lie-algebra (so3) spans of the ambient state can be routed through the
π-ball head h(u) = π b(tanh u) so decoded rotations stay on the first cover.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..lie import pi_ball_inverse
from ..mlp import Mlp
from ..numerics import autodiff as ad
from ..numerics.adam import AdamState, adam_step
from ..numerics.autodiff import NumericError, ParamGraph, ParamStore, Var
from ..numerics.rng import make_rng
from .flows import AffineCoupling, SplineCoupling

LOG_2PI = float(np.log(2.0 * np.pi))
FORMAT = "contraflow.vae"


class VaeTrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite ELBO"):
        super().__init__(f"VAE training aborted at epoch {epoch}: {message}")
        self.epoch = epoch


def pad(z, D: int):
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    if d >= D:
        raise ValueError(f"latent dim {d} must be smaller than ambient dim {D}")
    return np.concatenate([z, np.zeros(z.shape[:-1] + (D - d,))], axis=-1)


def unpad(x, d: int):
    x = np.asarray(x, dtype=float)
    if d >= x.shape[-1]:
        raise ValueError(f"latent dim {d} must be smaller than ambient dim {x.shape[-1]}")
    return x[..., :d].copy()


def kl_standard_normal(mu, sigma):
    """KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² - 1 - ln σ²), summed over the last axis."""
    s2 = ad.square(sigma)
    return 0.5 * ad.vsum(ad.square(mu) + s2 - 1.0 - ad.log(s2), axis=-1)


def _ball_head(u):
    """π b(tanh u) on the rows of u (traceable)."""
    t = ad.tanh(u)
    inf = ad.amax(ad.vabs(t), axis=-1, keepdims=True)
    two = ad.sqrt(ad.vsum(ad.square(t), axis=-1, keepdims=True) + 1e-300)
    return np.pi * t * (inf / two)


@dataclass
class VaeConfig:
    ambient_dim: int
    latent_dim: int = 2
    n_layers: int = 3
    coupling: str = "affine"  # or "spline"
    hidden: tuple = (32, 32)
    sigma_hidden: tuple = (32,)
    activation: str = "tanh"
    so3_spans: tuple = ()  # ((start, stop), ...) columns routed through the π-ball head
    n_bins: int = 10
    bound: float = 10.0
    obs_std: float = 1.0  # observation noise std of the Gaussian likelihood
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "ambient_dim": self.ambient_dim, "latent_dim": self.latent_dim, "n_layers": self.n_layers,
            "coupling": self.coupling, "hidden": list(self.hidden), "sigma_hidden": list(self.sigma_hidden),
            "activation": self.activation, "so3_spans": [list(s) for s in self.so3_spans],
            "n_bins": self.n_bins, "bound": self.bound, "obs_std": self.obs_std, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["sigma_hidden"] = tuple(d["sigma_hidden"])
        d["so3_spans"] = tuple(tuple(s) for s in d["so3_spans"])
        return cls(**d)


class InjectiveFlowVae:
    def __init__(self, cfg: VaeConfig):
        if cfg.latent_dim >= cfg.ambient_dim:
            raise ValueError("latent dim must be smaller than ambient dim")
        self.cfg = cfg
        self.D = cfg.ambient_dim
        self.d = cfg.latent_dim
        self.store = ParamStore()
        rng = make_rng(cfg.seed)
        self.layers = []
        for k in range(cfg.n_layers):
            name = f"flow{k}"
            if cfg.coupling == "affine":
                layer = AffineCoupling(name, self.D, k % 2, self.store, rng, cfg.hidden, cfg.activation)
            elif cfg.coupling == "spline":
                layer = SplineCoupling(name, self.D, k % 2, self.store, rng, cfg.n_bins, cfg.bound,
                                       activation=cfg.activation)
            else:
                raise ValueError(f"unknown coupling {cfg.coupling!r}")
            self.layers.append(layer)
        self.sigma_net = Mlp("sigma", (self.D, *cfg.sigma_hidden, self.d), cfg.activation)
        self.sigma_net.register(self.store, rng, last_scale=0.1)
        self.so3_spans = [tuple(s) for s in cfg.so3_spans]

    # -------------------------------------------------------------- helpers
    def _P(self, params):
        return self.store.arrays() if params is None else params

    @staticmethod
    def _batch(x):
        v = np.asarray(ad.value_of(x))
        if v.ndim == 1:
            return ad.reshape(x, (1, v.shape[0])), True
        return x, False

    @staticmethod
    def _unbatch(y, single):
        if single:
            return ad.reshape(y, np.shape(ad.value_of(y))[1:])
        return y

    def _head(self, u):
        if not self.so3_spans:
            return u
        cols, start = [], 0
        for a, b in self.so3_spans:
            if a > start:
                cols.append(ad.getitem(u, (slice(None), slice(start, a))))
            cols.append(_ball_head(ad.getitem(u, (slice(None), slice(a, b)))))
            start = b
        if start < self.D:
            cols.append(ad.getitem(u, (slice(None), slice(start, self.D))))
        return ad.concat(cols, axis=1)

    def _head_inverse(self, x):
        if not self.so3_spans:
            return x
        x = np.array(x, dtype=float)
        for a, b in self.so3_spans:
            x[:, a:b] = pi_ball_inverse(x[:, a:b])
        return x

    # -------------------------------------------------------------- maps
    def from_preflow(self, u, params=None):
        """Flows (and head) applied to pre-flow coordinates u ∈ ℝ^D."""
        P = self._P(params)
        u, single = self._batch(u)
        for layer in self.layers:
            u = layer.forward(u, P)
        return self._unbatch(self._head(u), single)

    def to_preflow(self, x, params=None):
        """Inverse head and inverse flows: ambient x -> pre-flow u."""
        P = self._P(params)
        x, single = self._batch(x)
        if self.so3_spans:
            if isinstance(x, Var):
                raise NotImplementedError("the π-ball inverse is not traced; encode data before tracing")
            x = self._head_inverse(x)
        for layer in reversed(self.layers):
            x = layer.inverse(x, P)
        return self._unbatch(x, single)

    def decode(self, z, params=None):
        z, single = self._batch(z)
        n = np.shape(ad.value_of(z))[0]
        u = ad.concat([z, np.zeros((n, self.D - self.d))], axis=1)
        return self._unbatch(self.from_preflow(u, params), single)

    def encode_mean(self, x, params=None):
        u = self.to_preflow(x, params)
        return ad.getitem(u, (Ellipsis, slice(0, self.d)))

    def encode_sigma(self, x, params=None):
        P = self._P(params)
        x, single = self._batch(x)
        s = ad.softplus(self.sigma_net(x, P)) + 1e-6
        return self._unbatch(s, single)

    def off_manifold_residual(self, x) -> np.ndarray | float:
        u = np.asarray(self.to_preflow(x))
        r = np.linalg.norm(u[..., self.d:], axis=-1)
        return float(r) if np.ndim(r) == 0 else r

    def reconstruct(self, x):
        return self.decode(self.encode_mean(x))

    def elbo(self, x, rng=None, eps=None, params=None):
        """Per-sample ELBO, Gaussian likelihood with std ``cfg.obs_std`` (default 1).

        Pass ``eps`` (standard-normal draws of latent shape) to fix the
        reparameterization noise; otherwise it is drawn from ``rng``.
        """
        x_arr = np.asarray(ad.value_of(x), dtype=float)
        single = x_arr.ndim == 1
        X = x_arr[None] if single else x_arr
        mu = self.encode_mean(X, params)
        sigma = self.encode_sigma(X, params)
        if eps is None:
            rng = rng if rng is not None else make_rng(0)
            eps = rng.standard_normal((len(X), self.d))
        eps = np.asarray(eps, dtype=float).reshape(len(X), self.d)
        z = mu + sigma * eps
        xr = self.decode(z, params)
        s2 = self.cfg.obs_std ** 2
        rec = (-0.5 / s2) * ad.vsum(ad.square(X - xr), axis=-1) \
            - 0.5 * self.D * (LOG_2PI + np.log(s2))
        out = rec - kl_standard_normal(mu, sigma)
        return ad.reshape(out, ()) if single else out

    # -------------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        from ..ncds import params_to_dict

        return {
            "format": FORMAT,
            "version": 1,
            "config": self.cfg.to_dict(),
            "layers": [layer.config() for layer in self.layers],
            "params": params_to_dict(self.store),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "InjectiveFlowVae":
        from ..ncds import params_from_dict

        if obj.get("format") != FORMAT:
            raise ValueError("not a serialized VAE")
        vae = cls(VaeConfig.from_dict(obj["config"]))
        params_from_dict(vae.store, obj["params"])
        return vae


@dataclass
class VaeTrainConfig:
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def reconstruction_mse(vae: InjectiveFlowVae, X: np.ndarray) -> float:
    R = vae.reconstruct(X)
    return float(np.mean(np.sum((X - R) ** 2, axis=-1)))


def train_vae(vae: InjectiveFlowVae, X, cfg: VaeTrainConfig | None = None, callback=None):
    """Adam ascent on the mean ELBO; returns (vae, history)."""
    cfg = cfg or VaeTrainConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != vae.D:
        raise ValueError(f"training data must be (N, {vae.D})")
    history: list[dict] = []
    if cfg.epochs == 0:
        return vae, history
    # the π-ball inverse is applied to the data once, outside the trace
    store = vae.store
    opt = AdamState.init(store.size, cfg.lr)
    rng = make_rng(cfg.seed)
    N = len(X)
    bs = N if not cfg.batch_size else min(int(cfg.batch_size), N)
    for epoch in range(cfg.epochs):
        order = rng.permutation(N) if bs < N else np.arange(N)
        total = 0.0
        for start in range(0, N, bs):
            b = order[start:start + bs]
            g = ParamGraph(store)
            eps = rng.standard_normal((len(b), vae.d))
            el = ad.vmean(vae.elbo(X[b], eps=eps, params=g.params))
            val = float(ad.value_of(el))
            if not np.isfinite(val):
                raise VaeTrainingError(epoch)
            try:
                gr = ad.grad(g, -el)
            except NumericError as e:
                raise VaeTrainingError(epoch, str(e)) from e
            new, opt = adam_step(store.values, gr, opt)
            store.values[:] = new
            total += val * len(b) / N
        rec = {"epoch": epoch, "elbo": total, "recon_mse": reconstruction_mse(vae, X)}
        history.append(rec)
        if callback is not None:
            callback(rec)
    return vae, history
