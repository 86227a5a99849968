"""Parametric forward problems: Poisson with uncertain diffusivity and plane
linear elasticity with uncertain Young's modulus."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fem
from .fem import Mesh
from .prior import (ELASTICITY_TRANSFORM, POISSON_TRANSFORM, GaussianPrior, TransformParams,
                    sample, transform_lognormal)

PROBLEMS = ("poisson", "linear_elasticity")


def default_source(x):
    return 1000.0 * (1.0 - x[:, 1]) * x[:, 1] * (1.0 - x[:, 0]) ** 2


def default_flux(x):
    return 50.0 * np.sin(5.0 * np.pi * x[:, 1])


def zero_function(x):
    return np.zeros(x.shape[0])


# named presets, the only supported override mechanism from the CLI
SOURCE_PRESETS = {"default": default_source, "zero": zero_function}
FLUX_PRESETS = {"default": default_flux, "zero": zero_function}


def poisson_dirichlet(mesh: Mesh) -> np.ndarray:
    """Boundary nodes with x1 < L1 (everything but the right edge)."""
    x1 = mesh.nodes[:, 0]
    return mesh.on_boundary & (x1 < mesh.L1 - fem.BOUNDARY_TOL)


def full_dirichlet(mesh: Mesh) -> np.ndarray:
    return mesh.on_boundary.copy()


def clamped_left(mesh: Mesh) -> np.ndarray:
    return np.abs(mesh.nodes[:, 0]) < fem.BOUNDARY_TOL


@dataclass(frozen=True, eq=False)
class PoissonConfig:
    mesh: Mesh
    source: Callable = default_source
    flux: Callable = default_flux
    dirichlet: Callable[[Mesh], np.ndarray] = poisson_dirichlet
    # values on Dirichlet nodes as a function of points; None means zero
    dirichlet_value: Callable | None = None


@dataclass(frozen=True, eq=False)
class ElasticityConfig:
    mesh: Mesh
    nu: float = 0.25
    body_force: tuple = (0.0, 0.0)
    traction: tuple = (0.0, 10.0)
    clamped: Callable[[Mesh], np.ndarray] = clamped_left
    # (n, 2) displacement on clamped nodes as a function of points; None means zero
    dirichlet_value: Callable | None = None


def _check_positive(m, mesh: Mesh, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (mesh.num_nodes,):
        raise ValueError(f"{name} must be a scalar nodal field of length {mesh.num_nodes}")
    if not np.all(m > 0):
        raise ValueError(f"{name} must be positive everywhere")
    return m


def poisson_rhs(cfg: PoissonConfig) -> np.ndarray:
    mesh = cfg.mesh
    return fem.load_vector(mesh, cfg.source) + fem.boundary_load(mesh, "right", cfg.flux)


def poisson_solve(cfg: PoissonConfig, m, rhs=None) -> np.ndarray:
    """Solve -div(m grad u) = f, u = g on the Dirichlet set, m du/dn = q elsewhere
    (the flux is integrated along the right edge)."""
    mesh = cfg.mesh
    m = _check_positive(m, mesh, "diffusivity")
    if rhs is None:
        rhs = poisson_rhs(cfg)
    K = fem.assemble_stiffness(mesh, m)
    fixed = np.flatnonzero(cfg.dirichlet(mesh))
    vals = 0.0 if cfg.dirichlet_value is None else cfg.dirichlet_value(mesh.nodes[fixed])
    return fem.solve_dirichlet(K, rhs, fixed, vals)


def elasticity_rhs(cfg: ElasticityConfig) -> np.ndarray:
    mesh = cfg.mesh
    parts = []
    for c in range(2):
        bc, tc = float(cfg.body_force[c]), float(cfg.traction[c])
        part = np.zeros(mesh.num_nodes)
        if bc != 0.0:
            part += fem.load_vector(mesh, lambda x, v=bc: np.full(x.shape[0], v))
        if tc != 0.0:
            part += fem.boundary_load(mesh, "right", lambda x, v=tc: np.full(x.shape[0], v))
        parts.append(part)
    return np.concatenate(parts)


def elasticity_solve(cfg: ElasticityConfig, E, rhs=None) -> np.ndarray:
    """Displacement (u1 block, u2 block) of the clamped plate under edge traction."""
    mesh = cfg.mesh
    E = _check_positive(E, mesh, "Young's modulus")
    if rhs is None:
        rhs = elasticity_rhs(cfg)
    K = fem.assemble_elasticity_stiffness(mesh, E, cfg.nu)
    fixed = np.flatnonzero(cfg.clamped(mesh))
    n = mesh.num_nodes
    dofs = np.concatenate([fixed, fixed + n])
    if cfg.dirichlet_value is None:
        vals = 0.0
    else:
        v = np.asarray(cfg.dirichlet_value(mesh.nodes[fixed]), dtype=float)
        vals = np.concatenate([v[:, 0], v[:, 1]])
    return fem.solve_dirichlet(K, rhs, dofs, vals)


class ForwardModel:
    """Parameter-to-state map F with its prior and lognormal transform.

    Subclasses set ``components`` and implement ``_solve(m)``.
    """

    problem: str = ""
    components: int = 1

    def __init__(self, config, prior: GaussianPrior, transform: TransformParams):
        self.config = config
        self.mesh = config.mesh
        self.prior = prior
        self.transform = transform
        if not prior.mesh.same_as(self.mesh):
            raise ValueError("prior and forward problem live on different meshes")

    @property
    def u_dim(self) -> int:
        return self.components * self.mesh.num_nodes

    def solve_fwd(self, m, transform: bool = False) -> np.ndarray:
        """Solve for the state.  With ``transform`` the input is the Gaussian field w."""
        if transform:
            m = transform_lognormal(m, self.transform)
        return self._solve(m)

    def sample_prior(self, rng: np.random.Generator, transform: bool = False) -> np.ndarray:
        w, _ = sample(self.prior, rng)
        return transform_lognormal(w, self.transform) if transform else w

    def _solve(self, m):
        raise NotImplementedError


class PoissonModel(ForwardModel):
    problem = "poisson"
    components = 1

    def __init__(self, config: PoissonConfig, prior: GaussianPrior,
                 transform: TransformParams = POISSON_TRANSFORM):
        super().__init__(config, prior, transform)
        # load vector does not depend on m
        self._rhs = poisson_rhs(config)

    def _solve(self, m):
        return poisson_solve(self.config, m, rhs=self._rhs)


class ElasticityModel(ForwardModel):
    problem = "linear_elasticity"
    components = 2

    def __init__(self, config: ElasticityConfig, prior: GaussianPrior,
                 transform: TransformParams = ELASTICITY_TRANSFORM):
        super().__init__(config, prior, transform)
        self._rhs = elasticity_rhs(config)

    def _solve(self, m):
        return elasticity_solve(self.config, m, rhs=self._rhs)


def solve_fwd(model: ForwardModel, w_or_m, transform: bool = False) -> np.ndarray:
    return model.solve_fwd(w_or_m, transform=transform)


def make_model(problem: str, mesh: Mesh, prior: GaussianPrior,
               transform: TransformParams | None = None, **config_kw) -> ForwardModel:
    if problem == "poisson":
        return PoissonModel(PoissonConfig(mesh, **config_kw), prior,
                            transform or POISSON_TRANSFORM)
    if problem == "linear_elasticity":
        return ElasticityModel(ElasticityConfig(mesh, **config_kw), prior,
                               transform or ELASTICITY_TRANSFORM)
    raise ValueError(f"unknown problem {problem!r}; expected one of {PROBLEMS}")
