"""Bayesian inversion of the Gaussian field w with preconditioned
Crank-Nicolson (pCN) MCMC and a pluggable forward map."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .fem import Mesh, interpolation_matrix
from .models import ForwardModel
from .prior import GaussianPrior, TransformParams, log_prior, noise_to_perturbation, transform_lognormal

log = logging.getLogger(__name__)

FORWARDS = ("fem", "deeponet", "pcanet", "fno")
MAX_CONSECUTIVE_FAILURES = 3
FLUSH_EVERY = 100


def observation_grid(L1: float = 1.0, L2: float = 1.0, n: int = 16) -> np.ndarray:
    """n x n points over the closed rectangle, x1 varying fastest."""
    g1, g2 = np.linspace(0.0, L1, n), np.linspace(0.0, L2, n)
    G1, G2 = np.meshgrid(g1, g2)
    return np.column_stack([G1.ravel(), G2.ravel()])


@dataclass(eq=False)
class Observation:
    points: np.ndarray  # (n_pts, 2)
    data: np.ndarray  # (n_pts * components,)
    sigma: float
    components: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"noise level must be positive, got {self.sigma}")
        if self.data.shape != (self.points.shape[0] * self.components,):
            raise ValueError("observation vector does not match grid size and components")

    @property
    def d_o(self) -> int:
        return self.data.size


class Observer:
    """Cached barycentric map from nodal states to the observation grid."""

    def __init__(self, mesh: Mesh, points):
        self.mesh = mesh
        self.points = np.asarray(points, dtype=float)
        self.P = interpolation_matrix(mesh, self.points)

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        N = self.mesh.num_nodes
        comps = u.size // N
        if comps * N != u.size:
            raise ValueError(f"state length {u.size} is not a multiple of node count {N}")
        # block layout: all grid points of component 0, then component 1
        return np.concatenate([self.P @ u[c * N:(c + 1) * N] for c in range(comps)])


def observe(u, obs_points, mesh: Mesh) -> np.ndarray:
    return Observer(mesh, obs_points)(u)


def potential_from_obs(u_obs, obs: Observation) -> float:
    r = np.asarray(u_obs) - obs.data
    return 0.5 * float(r @ r) / obs.sigma**2


def potential(w, forward: Callable, obs: Observation, observer: Observer):
    """Likelihood potential 0.5 |B(w) - o|^2 / sigma^2.  Returns (phi, u, u_obs)."""
    u = forward(w)
    u_obs = observer(u)
    return potential_from_obs(u_obs, obs), u, u_obs


TRUTH_VERSION = "bumps-1"


def synthetic_truth(mesh: Mesh, seed: int = 0, n_bumps: int = 2) -> np.ndarray:
    """Stand-in ground truth for synthetic inversions: a sum of Gaussian bumps
    in w with seeded centres in [0.2, 0.8]^2, radii in [0.12, 0.22] and
    amplitudes of alternating sign with magnitude in [0.4, 0.8].

    The generator is versioned (``TRUTH_VERSION``) so stored experiments stay
    reproducible if it ever changes.
    """
    rng = np.random.default_rng([seed, 7])
    x = mesh.nodes / np.array([mesh.L1, mesh.L2])
    w = np.zeros(mesh.num_nodes)
    for k in range(n_bumps):
        c = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.12, 0.22)
        a = (-1) ** k * rng.uniform(0.4, 0.8)
        w += a * np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * r * r))
    return w


def fem_forward(model: ForwardModel) -> Callable:
    """FEM path: the solver receives w and applies the lognormal transform itself."""
    return lambda w: model.solve_fwd(w, transform=True)


def surrogate_forward(surrogate, transform: TransformParams) -> Callable:
    """Surrogate path: transform w to m first, since surrogates are trained on m."""
    return lambda w: surrogate.predict(transform_lognormal(w, transform))


def make_observation(forward: Callable, true_w, observer: Observer, components: int,
                     noise_fraction: float) -> Observation:
    """Noiseless synthetic data with sigma = noise_fraction * mean(o)."""
    o = observer(forward(true_w))
    sigma = noise_fraction * float(np.mean(o))
    return Observation(observer.points.copy(), o, sigma, components)


def pcn_propose(current_w, prior: GaussianPrior, beta: float, rng: np.random.Generator):
    """v = beta xi + sqrt(1 - beta^2) w with xi a fresh zero-mean prior draw.

    Returns ``(v, s)`` where ``s`` is the white-noise vector behind xi.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"pCN step must lie in [0, 1], got {beta}")
    s = rng.standard_normal(prior.mesh.num_nodes)
    xi = noise_to_perturbation(prior, s)
    return beta * xi + np.sqrt(1.0 - beta**2) * np.asarray(current_w), s


def pcn_accept(phi_current: float, phi_proposed: float, rng: np.random.Generator) -> bool:
    """Accept iff phi_current - phi_proposed > log(U), U ~ Uniform(0, 1]."""
    u = 1.0 - rng.random()  # draw unconditionally so streams stay aligned
    if not np.isfinite(phi_proposed):
        return False
    return (phi_current - phi_proposed) > np.log(u)


@dataclass
class ChainConfig:
    k_max: int = 10500
    k_burn: int = 500
    beta: float = 0.2
    sigma_o: float | None = None  # None keeps the observation's own sigma
    forward: str = "fem"
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1 or not 0 <= self.k_burn < self.k_max:
            raise ValueError(f"need 0 <= k_burn < k_max, got k_burn={self.k_burn}, "
                             f"k_max={self.k_max}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"pCN step must lie in (0, 1], got {self.beta}")
        if self.forward not in FORWARDS:
            raise ValueError(f"unknown forward model {self.forward!r}")
        if self.sigma_o is not None and not self.sigma_o > 0:
            raise ValueError("sigma_o must be positive")


@dataclass(eq=False)
class ChainState:
    w: np.ndarray
    u: np.ndarray
    u_obs: np.ndarray
    cost: float
    log_prior: float
    accepted: bool = False


@dataclass(eq=False)
class ChainResult:
    posterior_mean: np.ndarray
    costs: np.ndarray  # cost of the chain state after each iteration, k = 1..k_max
    accepted: np.ndarray  # per-iteration accept flags
    acceptance_rate: np.ndarray  # running mean of the flags
    samples: np.ndarray | None = None  # retained w samples, (k_max - k_burn, p)
    initial: ChainState | None = field(default=None, repr=False)
    final: ChainState | None = field(default=None, repr=False)
    aborted: bool = False

    @property
    def n_retained(self) -> int:
        return int(self.accepted.size)


class ChainAborted(RuntimeError):
    def __init__(self, message, result: ChainResult):
        super().__init__(message)
        self.result = result


class _TraceWriter:
    def __init__(self, directory, meta: dict):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        self.csv = open(os.path.join(directory, "trace.csv"), "w")
        self.csv.write("iteration,cost,accepted,running_acceptance_rate\n")
        self.block, self.block_id = [], 0

    def row(self, k, cost, accepted, rate):
        self.csv.write(f"{k},{cost!r},{int(accepted)},{rate!r}\n")

    def sample(self, w):
        self.block.append(np.asarray(w, dtype="<f8"))

    def flush(self):
        if self.block:
            path = os.path.join(self.directory, f"samples_{self.block_id:05d}.bin")
            np.stack(self.block).astype("<f8").tofile(path)
            self.block, self.block_id = [], self.block_id + 1
        self.csv.flush()

    def close(self):
        self.flush()
        self.csv.close()


def run_chain(cfg: ChainConfig, forward: Callable, prior: GaussianPrior, obs: Observation,
              observer: Observer | None = None, trace_dir=None, keep_samples: bool = True,
              initial_w=None, meta: dict | None = None) -> ChainResult:
    """pCN over k_max iterations; samples after the first k_burn are averaged.

    A proposal whose forward solve fails (or yields a non-finite potential) is
    rejected; three consecutive failures abort the chain with the partial trace.
    """
    if observer is None:
        observer = Observer(prior.mesh, obs.points)
    if cfg.sigma_o is not None:
        obs = Observation(obs.points, obs.data, cfg.sigma_o, obs.components)
    rng = np.random.default_rng(cfg.seed)
    p = prior.mesh.num_nodes

    writer = None
    if trace_dir is not None:
        trace_meta = {"chain": asdict(cfg), "mesh": prior.mesh.params(), "prior": prior.config(),
                      "sigma_o": obs.sigma, "sample_dim": p, "samples_dtype": "f64",
                      "byte_order": "little"}
        trace_meta.update(meta or {})
        writer = _TraceWriter(trace_dir, trace_meta)

    if initial_w is None:
        s0 = rng.standard_normal(p)
        w0 = noise_to_perturbation(prior, s0)
    else:
        w0, s0 = np.asarray(initial_w, dtype=float), np.zeros(p)
    phi0, u0, uo0 = potential(w0, forward, obs, observer)
    current = ChainState(w0, u0, uo0, phi0, log_prior(prior, s0))
    initial = ChainState(w0.copy(), u0, uo0, phi0, current.log_prior)

    n_keep = cfg.k_max - cfg.k_burn
    costs = np.empty(cfg.k_max)
    flags = np.zeros(cfg.k_max, dtype=bool)
    samples = np.empty((n_keep, p)) if keep_samples else None
    total = np.zeros(p)
    n_acc, failures = 0, 0

    def result(k_done, aborted=False):
        acc = flags[:k_done]
        rate = np.cumsum(acc) / np.arange(1, k_done + 1)
        kept = max(k_done - cfg.k_burn, 0)
        mean = total / kept if kept else np.full(p, np.nan)
        return ChainResult(mean, costs[:k_done].copy(), acc.copy(), rate,
                           samples[:kept].copy() if samples is not None else None,
                           initial, current, aborted)

    try:
        for k in range(1, cfg.k_max + 1):
            v, s = pcn_propose(current.w, prior, cfg.beta, rng)
            try:
                phi, u, uo = potential(v, forward, obs, observer)
                failures = 0
                if not np.isfinite(phi):
                    log.warning("iteration %d: non-finite potential, proposal rejected", k)
            except Exception as exc:  # noqa: BLE001 - any forward failure counts
                failures += 1
                log.warning("iteration %d: forward failure %d: %s", k, failures, exc)
                phi, u, uo = np.inf, None, None
                if failures >= MAX_CONSECUTIVE_FAILURES:
                    costs[k - 1], flags[k - 1] = current.cost, False
                    if writer is not None:
                        writer.row(k, current.cost, False, n_acc / k)
                    raise ChainAborted(f"{failures} consecutive forward failures at iteration {k}",
                                       result(k, aborted=True)) from exc
            accept = pcn_accept(current.cost, phi, rng)
            if accept:
                current = ChainState(v, u, uo, phi, log_prior(prior, s), True)
                n_acc += 1
            costs[k - 1], flags[k - 1] = current.cost, accept
            if k > cfg.k_burn:
                total += current.w
                if samples is not None:
                    samples[k - cfg.k_burn - 1] = current.w
            if writer is not None:
                writer.row(k, current.cost, accept, n_acc / k)
                if k > cfg.k_burn:
                    writer.sample(current.w)
                if k % FLUSH_EVERY == 0:
                    writer.flush()
    finally:
        if writer is not None:
            writer.close()
    return result(cfg.k_max)


def read_trace_samples(trace_dir) -> np.ndarray:
    with open(os.path.join(trace_dir, "meta.json")) as fh:
        p = json.load(fh)["sample_dim"]
    files = sorted(f for f in os.listdir(trace_dir) if f.startswith("samples_"))
    blocks = [np.fromfile(os.path.join(trace_dir, f), dtype="<f8").reshape(-1, p) for f in files]
    return np.concatenate(blocks) if blocks else np.zeros((0, p))
