"""Run configuration with full-scale defaults, flattened to dotted keys for JSON
files and command-line flags."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .models import PROBLEMS
from .operators import ARCHS
from .mcmc import FORWARDS


@dataclass
class MeshConfig:
    nx: int = 50
    ny: int = 50
    L1: float = 1.0
    L2: float = 1.0


@dataclass
class PriorConfig:
    a_c: float = 0.005
    b_c: float = 1.0
    c_c: float = 0.2
    # None picks the problem default (1, 0 for Poisson; 100, 1000 for elasticity)
    alpha_m: float | None = None
    beta_m: float | None = None


@dataclass
class DataConfig:
    N: int = 4500
    # None: 3500 / 1000 at N = 4500, otherwise the same 7:9 proportion
    n_train: int | None = None
    n_test: int | None = None


@dataclass
class NetConfig:
    depth: int = 4
    width: int = 128
    r_m: int | None = None  # None: 100 for Poisson, 50 for elasticity
    r_u: int | None = None
    n_tr: int = 100
    d_h: int = 20
    layers: int = 3
    k_max: int = 8
    n1: int = 51
    n2: int = 51


@dataclass
class TrainConfig:
    epochs: int | None = None  # None: 1000, or 500 for FNO
    lr: float = 1e-3
    batch: int = 20
    weight_decay: float = 1e-4


@dataclass
class McmcConfig:
    k_max: int = 10500
    k_burn: int = 500
    beta: float | None = None  # None: 0.2 Poisson, 0.15 elasticity
    noise_fraction: float | None = None  # None: 0.05 Poisson, 0.01 elasticity
    forward: str = "fem"
    truth_seed: int = 0


@dataclass
class PathConfig:
    data: str | None = None
    model: str | None = None
    truth: str | None = None
    resume: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    problem: str = "poisson"
    arch: str = "pcanet"
    seed: int = 0
    mesh: MeshConfig = field(default_factory=MeshConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    paths: PathConfig = field(default_factory=PathConfig)


class ConfigError(ValueError):
    pass


def _field_types(cls, prefix="") -> dict:
    out = {}
    for f in fields(cls):
        default = f.default_factory() if callable(f.default_factory) else f.default
        if is_dataclass(default):
            out.update(_field_types(type(default), prefix + f.name + "."))
        else:
            out[prefix + f.name] = f.type
    return out


KEYS = _field_types(RunConfig)


def flatten(cfg: RunConfig) -> dict:
    flat = {}

    def walk(d, prefix):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(v, prefix + k + ".")
            else:
                flat[prefix + k] = v
    walk(asdict(cfg), "")
    return flat


def _coerce(key: str, value):
    if value is None:
        return None
    kind = KEYS[key].replace(" | None", "")
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects {kind}, got {value!r}") from None


def from_flat(flat: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for key, value in flat.items():
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        obj, parts = cfg, key.split(".")
        for p in parts[:-1]:
            obj = getattr(obj, p)
        setattr(obj, parts[-1], _coerce(key, value))
    return cfg


def load_json(path) -> dict:
    with open(path) as fh:
        flat = json.load(fh)
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: expected a JSON object of dotted keys")
    return flat


def default_split(N: int) -> tuple[int, int]:
    """3500 / 1000 at full scale, the same proportion elsewhere."""
    n_train = int(round(N * 3500 / 4500))
    return n_train, N - n_train


def resolve(cfg: RunConfig) -> RunConfig:
    """Fill problem-dependent defaults and validate invariants."""
    if cfg.problem not in PROBLEMS:
        raise ConfigError(f"problem must be one of {PROBLEMS}, got {cfg.problem!r}")
    if cfg.arch not in ARCHS:
        raise ConfigError(f"arch must be one of {ARCHS}, got {cfg.arch!r}")
    if cfg.mcmc.forward not in FORWARDS:
        raise ConfigError(f"forward must be one of {FORWARDS}, got {cfg.mcmc.forward!r}")
    poisson = cfg.problem == "poisson"
    p = cfg.prior
    if p.alpha_m is None:
        p.alpha_m = 1.0 if poisson else 100.0
    if p.beta_m is None:
        p.beta_m = 0.0 if poisson else 1000.0
    d = cfg.data
    if d.N < 1:
        raise ConfigError("data.N must be at least 1")
    if d.n_train is None and d.n_test is None:
        d.n_train, d.n_test = default_split(d.N)
    elif d.n_train is None:
        d.n_train = d.N - d.n_test
    elif d.n_test is None:
        d.n_test = d.N - d.n_train
    if d.n_train < 0 or d.n_test < 0 or d.n_train + d.n_test > d.N:
        raise ConfigError(f"cannot split {d.N} samples into {d.n_train} + {d.n_test}")
    n = cfg.net
    if n.r_m is None:
        n.r_m = 100 if poisson else 50
    if n.r_u is None:
        n.r_u = 100 if poisson else 50
    for key in ("depth", "width", "r_m", "r_u", "n_tr", "d_h", "layers", "k_max", "n1", "n2"):
        if getattr(n, key) < 1:
            raise ConfigError(f"net.{key} must be positive")
    t = cfg.train
    if t.epochs is None:
        t.epochs = 500 if cfg.arch == "fno" else 1000
    if t.epochs < 0 or t.batch < 1 or not t.lr > 0 or t.weight_decay < 0:
        raise ConfigError("training settings out of range")
    m = cfg.mcmc
    if m.beta is None:
        m.beta = 0.2 if poisson else 0.15
    if m.noise_fraction is None:
        m.noise_fraction = 0.05 if poisson else 0.01
    if not 0.0 < m.beta <= 1.0:
        raise ConfigError(f"mcmc.beta must lie in (0, 1], got {m.beta}")
    if not 0 <= m.k_burn < m.k_max:
        raise ConfigError("need 0 <= mcmc.k_burn < mcmc.k_max")
    if not m.noise_fraction > 0:
        raise ConfigError("mcmc.noise_fraction must be positive")
    if cfg.mesh.nx < 1 or cfg.mesh.ny < 1 or not (cfg.mesh.L1 > 0 and cfg.mesh.L2 > 0):
        raise ConfigError("mesh settings out of range")
    return cfg
