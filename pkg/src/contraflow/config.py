"""Run configuration: one dataclass per section, strict JSON loading.

Precedence is defaults < config file < command-line flags.  Unknown
sections or keys are rejected with the offending path.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    shape: str = "sine"  # one name, or a comma list to stack/concatenate
    combine: str = "stack"  # "stack": column-wise; "concat": demos joined, condition = shape index
    demos: int = 5
    points: int = 200
    noise: float = 0.05
    trim_head: int = 0
    align_target: bool = True
    resample_n: int | None = None
    pose_scale: float | None = None  # lift a 2-D set to position(3) + so3(3)


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    reg: str = "constant"  # constant | state-independent | state-dependent | eigenvalue
    beta: float = 1e-3
    eps: float = 1e-4
    cap: float = 10.0
    mode: str = "contractive"  # or "unconstrained"
    skew: bool = False
    quad_scheme: str = "gauss_legendre"
    quad_nodes: int = 16


@dataclass
class TrainSection:
    lr: float = 1e-3
    epochs: int = 1000
    batch_size: int | None = None
    anchor: str = "mean"
    cond: bool = False
    latent: int | None = None  # latent dimension; enables the VAE pipeline


@dataclass
class VaeSection:
    n_layers: int = 3
    coupling: str = "affine"
    hidden: list = field(default_factory=lambda: [32, 32])
    obs_std: float = 0.05
    lr: float = 3e-3
    epochs: int = 300
    batch_size: int | None = None


@dataclass
class ModulationConfig:
    obstacle: list | None = None  # [cx, cy, (cz,) r]
    reactivity: float = 1.0
    field: str | None = None  # distance-field grid JSON
    rho_imp: float = 1.0
    nu: float = 10.0
    k: float = 2.0
    sigma_beta_scale: float = 0.05  # σ_β = scale · mean demo speed
    res: int = 32
    bounds: list | None = None  # [x_lo, x_hi, y_lo, y_hi]
    bump: list | None = None  # [c_1, ..., c_m, radius, weight]
    boundary_circle: list | None = None  # [cx, cy, r, n]


@dataclass
class EvalConfig:
    dt: float | None = None  # None: the demos' dt
    steps: int | None = None  # None: demo length - 1
    hull_margin: float | None = None
    res: int = 20
    bounds: list | None = None
    n_starts: int = 5
    start_spread: float = 0.05
    start: list | None = None
    cond: list | None = None


@dataclass
class OutputConfig:
    out: str | None = None
    history: str | None = None
    format: str = "csv"  # field export: csv | svg


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    vae: VaeSection = field(default_factory=VaeSection)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    SECTIONS = ("data", "model", "train", "vae", "modulation", "eval", "output")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(d)
        return cfg

    def update(self, d: dict) -> None:
        """Merge a nested mapping into this config, rejecting unknown keys."""
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        for key, val in d.items():
            if key == "seed":
                if not isinstance(val, int) or isinstance(val, bool):
                    raise ConfigError("/seed: expected an integer")
                self.seed = val
                continue
            if key not in self.SECTIONS:
                raise ConfigError(f"/{key}: unknown section")
            if not isinstance(val, dict):
                raise ConfigError(f"/{key}: expected an object")
            sec = getattr(self, key)
            names = {f.name for f in dataclasses.fields(sec)}
            for k, v in val.items():
                if k not in names:
                    raise ConfigError(f"/{key}/{k}: unknown key")
                setattr(sec, k, list(v) if isinstance(v, tuple) else v)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
        return cls.from_dict(obj)
