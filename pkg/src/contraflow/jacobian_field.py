"""Matrix-valued network producing negative-definite Jacobians.

In contractive mode the field returns

    Ĵ(x) = -(A(x)ᵀ A(x) + diag ε(x))  [+ S(x) skew, D = 3 only]

where A is an MLP output reshaped row-major to D x D.  The symmetric part
is bounded above by -min ε, whatever the network weights are.

All methods accept either one point (D,) or a batch (N, D); batched calls
return batched results.  ``params`` defaults to the current store values
(untraced); pass ``ParamGraph.params`` to record a differentiable trace.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mlp import Mlp
from .numerics import autodiff as ad
from .numerics.autodiff import ParamStore
from .numerics.linalg import DimensionError, eigh_batch, sym_part
from .numerics.rng import make_rng

EPS_FLOOR = 1e-10


# --- regularization strategies ---------------------------------------------------

@dataclass
class Constant:
    eps: float = 1e-4
    tag = "constant"


@dataclass
class StateIndependent:
    beta: float = 1e-3
    cap: float = 10.0
    init: float = 0.1  # initial ε̂ magnitude (before per-dim jitter)
    tag = "state_independent"


@dataclass
class StateDependent:
    beta: float = 1e-3
    cap: float = 10.0
    hidden: tuple = (32,)
    tag = "state_dependent"


@dataclass
class Eigenvalue:
    beta: float = 1e-3
    reference: str | int = "max"
    eps: float = 1e-4
    tag = "eigenvalue"


STRATEGIES = {c.tag: c for c in (Constant, StateIndependent, StateDependent, Eigenvalue)}


def strategy_to_dict(reg) -> dict:
    d = asdict(reg)
    if "hidden" in d:
        d["hidden"] = list(d["hidden"])
    return {"tag": reg.tag, **d}


def strategy_from_dict(d: dict):
    d = dict(d)
    cls = STRATEGIES[d.pop("tag")]
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return cls(**d)


def _skew_basis() -> np.ndarray:
    # components (a, b, c) -> [[0,-a,b],[a,0,-c],[-b,c,0]] as a (3, 9) linear map
    B = np.zeros((3, 3, 3))
    B[0, 1, 0], B[0, 0, 1] = 1.0, -1.0
    B[1, 0, 2], B[1, 2, 0] = 1.0, -1.0
    B[2, 2, 1], B[2, 1, 2] = 1.0, -1.0
    return B.reshape(3, 9)


_SKEW_B = _skew_basis()


def skew_from_components(comps):
    """(…, 3) components -> (…, 3, 3) skew matrices."""
    lead = np.shape(ad.value_of(comps))[:-1]
    return ad.reshape(comps @ _SKEW_B, lead + (3, 3))


class JacobianField:
    def __init__(
        self,
        dim: int,
        cond_dim: int = 0,
        hidden: tuple = (64, 64),
        activation: str = "tanh",
        reg=None,
        mode: str = "contractive",
        skew: bool = False,
        seed: int = 0,
        store: ParamStore | None = None,
        prefix: str = "jf",
    ):
        if mode not in ("contractive", "unconstrained"):
            raise ValueError(f"unknown mode {mode!r}")
        if skew and dim != 3:
            raise DimensionError("the skew component is only defined for D = 3")
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.reg = reg if reg is not None else Constant()
        self.mode = mode
        self.skew = bool(skew)
        self.seed = int(seed)
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()

        rng = make_rng(seed)
        D, c = self.dim, self.cond_dim
        self.j_net = Mlp(f"{prefix}.j", (D + c, *self.hidden, D * D), activation)
        self.j_net.register(self.store, rng)
        self.skew_net = None
        if self.skew:
            self.skew_net = Mlp(f"{prefix}.skew", (D + c, *self.hidden, 3), activation)
            self.skew_net.register(self.store, rng, last_scale=0.1)
        self.eps_net = None
        if isinstance(self.reg, StateIndependent):
            jitter = 1.0 + 0.5 * rng.uniform(-1.0, 1.0, size=D)
            self.store.add(f"{prefix}.eps_hat", self.reg.init * jitter)
        elif isinstance(self.reg, StateDependent):
            self.eps_net = Mlp(f"{prefix}.eps", (D + c, *self.reg.hidden, D), activation)
            self.eps_net.register(self.store, rng, last_scale=0.1)

    # ------------------------------------------------------------------ helpers
    def _params(self, params):
        return self.store.arrays() if params is None else params

    def _inputs(self, x, cond):
        xv = np.asarray(ad.value_of(x), dtype=float)
        single = xv.ndim == 1
        if xv.shape[-1] != self.dim:
            raise DimensionError(f"state has dimension {xv.shape[-1]}, field expects {self.dim}")
        if single:
            x = ad.reshape(x, (1, self.dim))
        n = np.shape(ad.value_of(x))[0]
        if self.cond_dim > 0:
            if cond is None:
                raise DimensionError(f"field is conditional (c = {self.cond_dim}); a condition is required")
            cond = np.asarray(cond, dtype=float)
            if cond.shape[-1] != self.cond_dim:
                raise DimensionError(f"condition has dimension {cond.shape[-1]}, expected {self.cond_dim}")
            cond = np.broadcast_to(cond.reshape(-1, self.cond_dim), (n, self.cond_dim))
            inp = ad.concat([x, cond], axis=1)
        else:
            inp = x
        return inp, single, n

    @staticmethod
    def _out(m, single):
        if single:
            shape = np.shape(ad.value_of(m))[1:]
            return ad.reshape(m, shape)
        return m

    # --------------------------------------------------------------- operations
    def raw_matrix(self, x, cond=None, params=None):
        P = self._params(params)
        inp, single, n = self._inputs(x, cond)
        A = ad.reshape(self.j_net(inp, P), (n, self.dim, self.dim))
        return self._out(A, single)

    def eps_vector(self, x=None, cond=None, params=None):
        P = self._params(params)
        D = self.dim
        reg = self.reg
        if isinstance(reg, StateDependent):
            inp, single, n = self._inputs(x, cond)
            raw = self.eps_net(inp, P)
            e_hat = reg.cap * ad.tanh(raw * (1.0 / reg.cap))
            return self._out(ad.square(e_hat) + EPS_FLOOR, single)
        if isinstance(reg, StateIndependent):
            e = ad.square(P[f"{self.prefix}.eps_hat"]) + EPS_FLOOR
        else:
            e = np.full(D, float(reg.eps))
        if x is None:
            return e
        xv = np.asarray(ad.value_of(x))
        if xv.ndim == 1:
            return e
        return e * np.ones((xv.shape[0], 1))

    def nd_jacobian(self, x, cond=None, params=None):
        if self.mode != "contractive":
            raise RuntimeError("nd_jacobian is unavailable in unconstrained mode; use raw_matrix")
        A = self.raw_matrix(x, cond, params)
        eps = self.eps_vector(x, cond, params)
        AtA = ad.swap_last(A) @ A
        AtA = 0.5 * (AtA + ad.swap_last(AtA))
        diag = ad.reshape(eps, np.shape(ad.value_of(eps)) + (1,)) * np.eye(self.dim)
        return -(AtA + diag)

    def skew_matrix(self, x, cond=None, params=None):
        if self.dim != 3:
            raise DimensionError("skew_matrix is only defined for D = 3")
        if self.skew_net is None:
            raise RuntimeError("no skew network configured")
        P = self._params(params)
        inp, single, n = self._inputs(x, cond)
        return self._out(skew_from_components(self.skew_net(inp, P)), single)

    def full_jacobian(self, x, cond=None, params=None):
        if self.mode == "unconstrained":
            J = self.raw_matrix(x, cond, params)
        else:
            J = self.nd_jacobian(x, cond, params)
        if self.skew_net is not None:
            J = J + self.skew_matrix(x, cond, params)
        return J

    def reg_loss(self, X=None, cond=None, params=None):
        reg = self.reg
        if isinstance(reg, Constant):
            return 0.0
        if isinstance(reg, Eigenvalue):
            J = self.full_jacobian(X, cond, params)
            S = 0.5 * (J + ad.swap_last(J))
            lam = ad.eigvalsh(S)
            if reg.reference == "max":
                ref = lam[..., -1:]
            else:
                i = int(reg.reference)
                ref = lam[..., i:i + 1]
            per_point = ad.vsum(ad.square(ref - lam), axis=-1)
            return -reg.beta * ad.vmean(per_point)
        if isinstance(reg, StateIndependent):
            e = self.eps_vector(None, None, params)
        else:
            e = self.eps_vector(X, cond, params)
        spread = ad.vsum(ad.square(e[..., 0:1] - e[..., 1:]), axis=-1)
        return -reg.beta * ad.vmean(spread)

    def contraction_stats(self, x, cond=None, params=None):
        """(rate, spread) = (λ_max, λ_max - λ_min) of sym_part(J); batched if x is."""
        J = ad.value_of(self.full_jacobian(x, cond, params))
        w, _ = eigh_batch(sym_part(J))
        rate = w[..., -1]
        spread = np.abs(w[..., -1] - w[..., 0])
        if np.ndim(rate) == 0:
            return float(rate), float(spread)
        return rate, spread

    def project(self) -> None:
        """Apply the ε̂ cap after an optimizer step."""
        if isinstance(self.reg, StateIndependent):
            name = f"{self.prefix}.eps_hat"
            self.store.set(name, np.clip(self.store.get(name), -self.reg.cap, self.reg.cap))

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "cond_dim": self.cond_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "reg": strategy_to_dict(self.reg),
            "mode": self.mode,
            "skew": self.skew,
            "seed": self.seed,
        }
