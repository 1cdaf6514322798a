"""Invertible coupling layers (affine and rational-quadratic spline).

Each layer splits the coordinates with a binary mask: the fixed half feeds
a conditioner network, whose output transforms the other half
elementwise.  The conditioner's output layer starts at zero, so a freshly
built layer is the identity map.
"""
from __future__ import annotations

import numpy as np

from ..mlp import Mlp, ResidualMlp
from ..numerics import autodiff as ad
from ..numerics.autodiff import ParamStore


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """True on the coordinates that stay fixed in this layer."""
    return (np.arange(dim) % 2) == parity


def _assemble(fixed, trans, fixed_idx, trans_idx):
    """Put the two halves back in their original column order."""
    inv = np.argsort(np.concatenate([fixed_idx, trans_idx]))
    both = ad.concat([fixed, trans], axis=1)
    return ad.getitem(both, (slice(None), inv))


class AffineCoupling:
    kind = "affine"

    def __init__(self, name: str, dim: int, parity: int, store: ParamStore, rng,
                 hidden=(32, 32), activation: str = "tanh", scale_bound: float = 2.0):
        self.name = name
        self.dim = dim
        self.mask = alternating_mask(dim, parity)
        self.fixed_idx = np.nonzero(self.mask)[0]
        self.trans_idx = np.nonzero(~self.mask)[0]
        nf, nt = len(self.fixed_idx), len(self.trans_idx)
        self.scale_bound = float(scale_bound)
        self.net = Mlp(name, (nf, *hidden, 2 * nt), activation)
        self.net.register(store, rng, last_scale=0.0)

    def _scale_shift(self, xf, P):
        nt = len(self.trans_idx)
        h = self.net(xf, P)
        raw_s = h[:, :nt]
        t = h[:, nt:]
        # bounded log-scale keeps the inverse well conditioned
        s = self.scale_bound * ad.tanh(raw_s * (1.0 / self.scale_bound))
        return s, t

    def forward(self, x, P):
        xf = ad.getitem(x, (slice(None), self.fixed_idx))
        xt = ad.getitem(x, (slice(None), self.trans_idx))
        s, t = self._scale_shift(xf, P)
        yt = xt * ad.exp(s) + t
        return _assemble(xf, yt, self.fixed_idx, self.trans_idx)

    def inverse(self, y, P):
        yf = ad.getitem(y, (slice(None), self.fixed_idx))
        yt = ad.getitem(y, (slice(None), self.trans_idx))
        s, t = self._scale_shift(yf, P)
        xt = (yt - t) * ad.exp(-s)
        return _assemble(yf, xt, self.fixed_idx, self.trans_idx)

    def config(self) -> dict:
        return {"kind": self.kind, "mask": self.mask.astype(int).tolist(), "scale_bound": self.scale_bound}


class SplineCoupling:
    """Monotone rational-quadratic spline on [-B, B] with identity tails."""

    kind = "spline"

    def __init__(self, name: str, dim: int, parity: int, store: ParamStore, rng,
                 n_bins: int = 10, bound: float = 10.0, hidden: int = 30, n_blocks: int = 2,
                 activation: str = "tanh", min_width: float = 1e-3, min_deriv: float = 1e-3):
        self.name = name
        self.dim = dim
        self.mask = alternating_mask(dim, parity)
        self.fixed_idx = np.nonzero(self.mask)[0]
        self.trans_idx = np.nonzero(~self.mask)[0]
        self.n_bins = int(n_bins)
        self.bound = float(bound)
        self.min_width = min_width
        self.min_deriv = min_deriv
        nt = len(self.trans_idx)
        self.net = ResidualMlp(name, len(self.fixed_idx), nt * (3 * self.n_bins - 1), hidden, n_blocks, activation)
        self.net.register(store, rng, last_scale=0.0)

    def _knots(self, xf, P):
        K, B = self.n_bins, self.bound
        nt = len(self.trans_idx)
        n = np.shape(ad.value_of(xf))[0]
        h = ad.reshape(self.net(xf, P), (n, nt, 3 * K - 1))
        uw, uh, ud = h[..., :K], h[..., K:2 * K], h[..., 2 * K:]

        def bins(u):
            m = np.max(ad.value_of(u), axis=-1, keepdims=True)
            e = ad.exp(u - m)
            p = e / ad.vsum(e, axis=-1, keepdims=True)
            p = self.min_width + (1.0 - self.min_width * K) * p
            c = ad.cumsum(p, axis=-1)
            zero = np.zeros((n, nt, 1))
            edges = ad.concat([zero, c], axis=-1)
            edges = 2.0 * B * edges - B
            # pin the outer knots exactly so the tails join continuously
            pin = np.zeros(K + 1, dtype=bool)
            pin[0] = pin[-1] = True
            edges = ad.where(pin, np.where(np.arange(K + 1) == 0, -B, B) * np.ones((n, nt, 1)), edges)
            widths = edges[..., 1:] - edges[..., :-1]
            return edges, widths

        xk, w = bins(uw)
        yk, hgt = bins(uh)
        # softplus shifted so that raw 0 gives derivative 1 (identity at init)
        shift = np.log(np.expm1(1.0 - self.min_deriv))
        inner = self.min_deriv + ad.softplus(ud + shift)
        ones = np.ones((n, nt, 1))
        d = ad.concat([ones, inner, ones], axis=-1)
        return xk, w, yk, hgt, d

    @staticmethod
    def _gather(a, idx):
        return ad.getitem(ad.take_along_axis(a, idx, axis=-1), (Ellipsis, 0))

    def _apply(self, x, P, inverse: bool):
        xf = ad.getitem(x, (slice(None), self.fixed_idx))
        xt = ad.getitem(x, (slice(None), self.trans_idx))
        xk, w, yk, hgt, d = self._knots(xf, P)
        B = self.bound
        xv = ad.value_of(xt)
        inside = (xv > -B) & (xv < B)
        xc = ad.clip(xt, -B, B)
        knots = ad.value_of(yk if inverse else xk)
        idx = (np.sum(ad.value_of(xc)[..., None] >= knots[..., 1:-1], axis=-1))[..., None]
        idx = np.clip(idx, 0, self.n_bins - 1)
        x_k = self._gather(xk, idx)
        w_k = self._gather(w, idx)
        y_k = self._gather(yk, idx)
        h_k = self._gather(hgt, idx)
        d_k = self._gather(d, idx)
        d_k1 = self._gather(d, idx + 1)
        delta = h_k / w_k
        if not inverse:
            xi = (xc - x_k) / w_k
            xi1 = xi * (1.0 - xi)
            num = h_k * (delta * ad.square(xi) + d_k * xi1)
            den = delta + (d_k1 + d_k - 2.0 * delta) * xi1
            out = y_k + num / den
        else:
            dy = xc - y_k
            s = d_k1 + d_k - 2.0 * delta
            a = h_k * (delta - d_k) + dy * s
            b = h_k * d_k - dy * s
            c = -delta * dy
            disc = ad.square(b) - 4.0 * a * c
            disc = ad.where(ad.value_of(disc) > 0, disc, np.zeros(np.shape(ad.value_of(disc))))
            xi = (2.0 * c) / (-b - ad.sqrt(disc + 1e-300))
            # Newton steps on the forward map polish the closed-form root
            for _ in range(2):
                xi1 = xi * (1.0 - xi)
                den = delta + s * xi1
                fwd = h_k * (delta * ad.square(xi) + d_k * xi1) / den - dy
                # dy/dξ = w δ² (d₁ξ² + 2δξ(1-ξ) + d₀(1-ξ)²) / den², and w δ = h
                slope = h_k * delta * (d_k1 * ad.square(xi) + 2.0 * delta * xi1
                                       + d_k * ad.square(1.0 - xi)) / ad.square(den)
                xi = xi - fwd / slope
            out = xi * w_k + x_k
        yt = ad.where(inside, out, xt)
        return _assemble(xf, yt, self.fixed_idx, self.trans_idx)

    def forward(self, x, P):
        return self._apply(x, P, inverse=False)

    def inverse(self, y, P):
        return self._apply(y, P, inverse=True)

    def config(self) -> dict:
        return {"kind": self.kind, "mask": self.mask.astype(int).tolist(), "n_bins": self.n_bins, "bound": self.bound}
