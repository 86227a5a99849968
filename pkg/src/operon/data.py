"""Dataset generation, splitting, grid resampling and the on-disk format.

A dataset directory holds ``meta.json`` plus one raw little-endian float64
file per array (``X.bin``, ``Y.bin``, optionally ``Xgrid.bin``/``Ygrid.bin``
and ``norm.json``).  Shapes live in the metadata; files carry no header.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .fem import SolverError
from .models import ForwardModel
from .operators import GridTransfer

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
MAX_RETRIES = 3


@dataclass(eq=False)
class Dataset:
    X: np.ndarray  # (N, p_m) transformed parameter samples
    Y: np.ndarray  # (N, p_u) states
    meta: dict = field(default_factory=dict)
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y must have the same number of rows")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def train(self):
        return self.X[self.train_idx], self.Y[self.train_idx]

    def test(self):
        return self.X[self.test_idx], self.Y[self.test_idx]


class GenerationError(RuntimeError):
    pass


def generate(model: ForwardModel, N: int, seed: int = 0) -> Dataset:
    """N prior draws pushed through the lognormal transform and the forward solver.

    Sample I uses the generator seeded with (seed, I, attempt), so rows do not
    depend on each other or on execution order.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    X = np.empty((N, model.mesh.num_nodes))
    Y = np.empty((N, model.u_dim))
    for i in range(N):
        for attempt in range(MAX_RETRIES + 1):
            rng = np.random.default_rng([seed, i, attempt])
            try:
                m = model.sample_prior(rng, transform=True)
                u = model.solve_fwd(m)
                break
            except (SolverError, OverflowError, ValueError) as exc:
                log.warning("sample %d attempt %d failed: %s", i, attempt, exc)
        else:
            raise GenerationError(f"sample {i} failed {MAX_RETRIES + 1} times")
        X[i], Y[i] = m, u
    meta = {
        "problem": model.problem,
        "components": model.components,
        "mesh": model.mesh.params(),
        "prior": model.prior.config(),
        "transform": {"alpha_m": model.transform.alpha, "beta_m": model.transform.beta},
        "seed": seed,
    }
    return Dataset(X, Y, meta)


def split(ds: Dataset, n_train: int, n_test: int, seed: int = 0) -> Dataset:
    """Seeded shuffle then partition; returns the same dataset with split indices set."""
    if n_train < 0 or n_test < 0 or n_train + n_test > ds.N:
        raise ValueError(f"cannot take {n_train} train + {n_test} test rows from {ds.N}")
    perm = np.random.default_rng([seed, 1]).permutation(ds.N)
    ds.train_idx = np.sort(perm[:n_train])
    ds.test_idx = np.sort(perm[n_train:n_train + n_test])
    ds.meta["split"] = {"n_train": n_train, "n_test": n_test, "seed": seed}
    return ds


@dataclass(eq=False)
class GridDataset:
    X: np.ndarray  # (N, n1, n2, 3) raw m with grid coordinates
    Y: np.ndarray  # (N, n1, n2, d_o)
    norm: dict  # per-grid-point mean / std over training rows


def to_grid_dataset(ds: Dataset, transfer: GridTransfer) -> GridDataset:
    if ds.meta.get("mesh") is not None and ds.meta["mesh"] != transfer.mesh.params():
        raise ValueError("grid transfer was built on a different mesh than the dataset")
    m_grid = transfer.fem_to_grid(ds.X)
    u_grid = transfer.fem_to_grid(ds.Y)
    coords = np.broadcast_to(transfer.grid, (ds.N,) + transfer.grid.shape)
    X = np.concatenate([m_grid, coords], axis=-1)
    rows = ds.train_idx if ds.train_idx.size else np.arange(ds.N)
    norm = {
        "m_mean": m_grid[rows, ..., 0].mean(axis=0),
        "m_std": m_grid[rows, ..., 0].std(axis=0),
        "u_mean": u_grid[rows].mean(axis=0),
        "u_std": u_grid[rows].std(axis=0),
    }
    return GridDataset(X, u_grid, norm)


# --- directory format --------------------------------------------------------

def _write_array(directory, name, arr) -> list[int]:
    np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(directory, name + ".bin"))
    return list(arr.shape)


def _read_array(directory, name, shape) -> np.ndarray:
    arr = np.fromfile(os.path.join(directory, name + ".bin"), dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{name}.bin has {arr.size} values, metadata says {shape}")
    return arr.reshape(shape).astype(np.float64)


def write_dataset(directory, ds: Dataset, grid: GridDataset | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = dict(ds.meta)
    meta.update(format_version=FORMAT_VERSION, dtype="f64", byte_order="little")
    shapes = {"X": _write_array(directory, "X", ds.X), "Y": _write_array(directory, "Y", ds.Y)}
    meta["train_idx"] = [int(i) for i in ds.train_idx]
    meta["test_idx"] = [int(i) for i in ds.test_idx]
    if grid is not None:
        shapes["Xgrid"] = _write_array(directory, "Xgrid", grid.X)
        shapes["Ygrid"] = _write_array(directory, "Ygrid", grid.Y)
        with open(os.path.join(directory, "norm.json"), "w") as fh:
            json.dump({k: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
                       for k, v in grid.norm.items()}, fh)
    meta["shapes"] = shapes
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_dataset(directory) -> tuple[Dataset, GridDataset | None]:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {meta.get('format_version')!r}")
    shapes = meta.pop("shapes")
    train_idx = np.asarray(meta.pop("train_idx", []), dtype=np.int64)
    test_idx = np.asarray(meta.pop("test_idx", []), dtype=np.int64)
    for k in ("format_version", "dtype", "byte_order"):
        meta.pop(k, None)
    ds = Dataset(_read_array(directory, "X", shapes["X"]), _read_array(directory, "Y", shapes["Y"]),
                 meta, train_idx, test_idx)
    grid = None
    if "Xgrid" in shapes:
        with open(os.path.join(directory, "norm.json")) as fh:
            raw = json.load(fh)
        norm = {k: np.asarray(v["values"], dtype=float).reshape(v["shape"]) for k, v in raw.items()}
        grid = GridDataset(_read_array(directory, "Xgrid", shapes["Xgrid"]),
                           _read_array(directory, "Ygrid", shapes["Ygrid"]), norm)
    return ds, grid
