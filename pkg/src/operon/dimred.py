"""Column-wise normalization and SVD projectors for reduced-order surrogates."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Normalizer:
    """x -> (x - mean) / (std + tol), with the population standard deviation."""

    mean: np.ndarray
    std: np.ndarray
    tol: float = DEFAULT_TOL

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / (self.std + self.tol)

    def invert(self, Xhat):
        return np.asarray(Xhat, dtype=float) * (self.std + self.tol) + self.mean


def fit_normalizer(X, tol: float = DEFAULT_TOL) -> Normalizer:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need an N x p matrix with N >= 2, got shape {X.shape}")
    return Normalizer(X.mean(axis=0), X.std(axis=0), tol)


@dataclass(frozen=True, eq=False)
class Projector:
    basis: np.ndarray  # (r, p), orthonormal rows
    singular_values: np.ndarray  # full spectrum

    @property
    def r(self) -> int:
        return self.basis.shape[0]

    @property
    def p(self) -> int:
        return self.basis.shape[1]

    def project(self, x):
        return project(self, x)

    def lift(self, z):
        return lift(self, z)


def _canonical_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(basis.shape[0]), idx])
    signs[signs == 0] = 1.0
    return basis * signs[:, None]


def fit_projector(Xhat, r: int) -> Projector:
    """Leading r left singular vectors of Xhat^T (samples as columns)."""
    Xhat = np.asarray(Xhat, dtype=float)
    N, p = Xhat.shape
    if not 1 <= r <= min(N, p):
        raise ValueError(f"reduced dimension must lie in [1, {min(N, p)}], got {r}")
    U, s, _ = np.linalg.svd(Xhat.T, full_matrices=False)
    return Projector(_canonical_signs(U[:, :r].T.copy()), s)


def project(proj: Projector, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != proj.p:
        raise ValueError(f"expected trailing dimension {proj.p}, got {x.shape[-1]}")
    return x @ proj.basis.T


def lift(proj: Projector, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != proj.r:
        raise ValueError(f"expected trailing dimension {proj.r}, got {z.shape[-1]}")
    return z @ proj.basis


def projection_errors(Xhat, proj: Projector) -> np.ndarray:
    """Per-sample l2 norm of the part of each row outside the retained span."""
    Xhat = np.asarray(Xhat, dtype=float)
    return np.linalg.norm(Xhat - lift(proj, project(proj, Xhat)), axis=1)


def write_spectrum(path, singular_values) -> None:
    """CSV with the raw spectrum, sigma / sigma_max and the energy fraction sigma^2 / sum sigma^2."""
    s = np.asarray(singular_values, dtype=float)
    rel = s / s[0] if s.size and s[0] > 0 else np.zeros_like(s)
    energy = s**2 / np.sum(s**2) if np.sum(s**2) > 0 else np.zeros_like(s)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "sigma", "sigma_over_max", "energy_fraction"])
        for k in range(s.size):
            w.writerow([k + 1, repr(float(s[k])), repr(float(rel[k])), repr(float(energy[k]))])
