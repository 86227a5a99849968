"""Gaussian random fields with covariance (a K(b) + c M)^{-2} on P1 meshes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import Mesh, SolverError, assemble_mass, assemble_stiffness, solve_spd

EXP_OVERFLOW = 700.0


class InvalidConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class TransformParams:
    """Pointwise map m = alpha * exp(w) + beta."""

    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")


POISSON_TRANSFORM = TransformParams(1.0, 0.0)
ELASTICITY_TRANSFORM = TransformParams(100.0, 1000.0)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    mesh: Mesh = field(repr=False)
    a_c: float
    b_c: object  # float or nodal array
    c_c: float
    A: sp.csr_matrix = field(repr=False)
    M: sp.csr_matrix = field(repr=False)
    mean: np.ndarray = field(repr=False)
    seed: int = 0

    def config(self) -> dict:
        b = self.b_c if np.ndim(self.b_c) == 0 else "field"
        return {"a_c": self.a_c, "b_c": b, "c_c": self.c_c, "seed": self.seed}


def build_prior(mesh: Mesh, a_c: float = 0.005, b_c=1.0, c_c: float = 0.2,
                mean=None, seed: int = 0) -> GaussianPrior:
    b_arr = np.asarray(b_c, dtype=float)
    if a_c < 0 or c_c < 0 or np.any(b_arr < 0) or not (a_c > 0 or c_c > 0):
        raise InvalidConfiguration(
            f"operator coefficients do not define an SPD operator: a_c={a_c}, c_c={c_c}, "
            f"min b_c={b_arr.min()}")
    M = assemble_mass(mesh)
    if a_c > 0:
        A = (a_c * assemble_stiffness(mesh, b_c) + c_c * M).tocsr()
    else:
        A = (c_c * M).tocsr()
    if mean is None:
        mean = np.zeros(mesh.num_nodes)
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (mesh.num_nodes,):
        raise ValueError(f"prior mean must be a scalar nodal field, got shape {mean.shape}")
    try:
        solve_spd(A, M @ np.ones(mesh.num_nodes))
    except SolverError as exc:
        raise InvalidConfiguration(f"prior operator is not SPD: {exc}") from exc
    b_store = float(b_arr) if b_arr.ndim == 0 else b_arr.copy()
    return GaussianPrior(mesh, float(a_c), b_store, float(c_c), A, M, mean.copy(), int(seed))


def noise_to_perturbation(prior: GaussianPrior, s: np.ndarray) -> np.ndarray:
    """Zero-mean part v of a sample: the solution of A v = M s."""
    return solve_spd(prior.A, prior.M @ np.asarray(s, dtype=float))


def sample(prior: GaussianPrior, rng: np.random.Generator, s=None):
    """Draw w = mean + v with A v = M s, s i.i.d. standard normal per node.

    Returns ``(w, s)``.  Passing ``s`` skips the draw.
    """
    if s is None:
        s = rng.standard_normal(prior.mesh.num_nodes)
    s = np.asarray(s, dtype=float)
    return prior.mean + noise_to_perturbation(prior, s), s


def log_prior(prior: GaussianPrior, s: np.ndarray) -> float:
    """-(1/2) s.M s, up to an additive constant.  Diagnostic only."""
    s = np.asarray(s, dtype=float)
    return -0.5 * float(s @ (prior.M @ s))


def transform_lognormal(w, params: TransformParams) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w > EXP_OVERFLOW):
        raise OverflowError(f"Gaussian field value {w.max():.3g} overflows exp()")
    return params.alpha * np.exp(w) + params.beta
