"""Multilayer perceptrons whose weights live in a ParamStore."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import ParamStore


@dataclass
class Mlp:
    name: str
    widths: tuple[int, ...]  # (in, hidden..., out)
    activation: str = "tanh"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def register(self, store: ParamStore, rng: np.random.Generator, last_scale: float = 1.0) -> None:
        """Add weights with LeCun-normal init; ``last_scale=0`` zeroes the output layer."""
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            W = rng.standard_normal((a, b)) / np.sqrt(a)
            if i == self.n_layers - 1:
                W = W * last_scale
            store.add(f"{self.name}.W{i}", W)
            store.add(f"{self.name}.b{i}", np.zeros(b))

    def __call__(self, x, params):
        act = ad.ACTIVATIONS[self.activation]
        h = x
        for i in range(self.n_layers):
            h = h @ params[f"{self.name}.W{i}"] + params[f"{self.name}.b{i}"]
            if i < self.n_layers - 1:
                h = act(h)
        return h


@dataclass
class ResidualMlp:
    """Linear-in, residual tanh blocks, linear-out conditioner."""

    name: str
    in_dim: int
    out_dim: int
    hidden: int = 30
    n_blocks: int = 2
    activation: str = "tanh"

    def register(self, store: ParamStore, rng: np.random.Generator, last_scale: float = 0.0) -> None:
        h = self.hidden
        store.add(f"{self.name}.Win", rng.standard_normal((self.in_dim, h)) / np.sqrt(self.in_dim))
        store.add(f"{self.name}.bin", np.zeros(h))
        for k in range(self.n_blocks):
            for j in range(2):
                store.add(f"{self.name}.blk{k}.W{j}", rng.standard_normal((h, h)) / np.sqrt(h))
                store.add(f"{self.name}.blk{k}.b{j}", np.zeros(h))
        store.add(f"{self.name}.Wout", last_scale * rng.standard_normal((h, self.out_dim)) / np.sqrt(h))
        store.add(f"{self.name}.bout", np.zeros(self.out_dim))

    def __call__(self, x, params):
        act = ad.ACTIVATIONS[self.activation]
        p = self.name
        h = x @ params[f"{p}.Win"] + params[f"{p}.bin"]
        for k in range(self.n_blocks):
            t = act(h)
            t = t @ params[f"{p}.blk{k}.W0"] + params[f"{p}.blk{k}.b0"]
            t = act(t)
            t = t @ params[f"{p}.blk{k}.W1"] + params[f"{p}.blk{k}.b1"]
            h = h + t
        return act(h) @ params[f"{p}.Wout"] + params[f"{p}.bout"]
