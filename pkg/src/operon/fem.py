"""P1 finite elements on structured triangulations of a rectangle.

Nodal vectors are plain float64 arrays.  Vector-valued fields are stored
component-blocked: all node values of component 0, then component 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

BOUNDARY_TOL = 1e-10
SNAP_TOL = 1e-12


class SolverError(RuntimeError):
    """Raised when CG does not reach the requested residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    nx: int
    ny: int
    L1: float
    L2: float
    nodes: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    # per-node edge flags, keyed by "left", "right", "bottom", "top"
    boundary: dict = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def on_boundary(self) -> np.ndarray:
        b = self.boundary
        return b["left"] | b["right"] | b["bottom"] | b["top"]

    def params(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "L1": self.L1, "L2": self.L2}

    def same_as(self, other: "Mesh") -> bool:
        return self.params() == other.params()


def build_rect_mesh(nx: int, ny: int, L1: float = 1.0, L2: float = 1.0) -> Mesh:
    """Triangulate [0, L1] x [0, L2] with nx*ny cells, each split along the
    lower-left to upper-right diagonal.  Node (i, j) has index j*(nx+1) + i."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be positive integers, got nx={nx}, ny={ny}")
    if not (L1 > 0 and L2 > 0):
        raise ValueError(f"side lengths must be positive, got L1={L1}, L2={L2}")
    nx, ny = int(nx), int(ny)
    L1, L2 = float(L1), float(L2)

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    ii, jj = ii.ravel(), jj.ravel()
    nodes = np.column_stack([ii * (L1 / nx), jj * (L2 / ny)])

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (cj * (nx + 1) + ci).ravel()
    n1 = n0 + 1
    n2 = n0 + nx + 2
    n3 = n0 + nx + 1
    lower = np.column_stack([n0, n1, n2])
    upper = np.column_stack([n0, n2, n3])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    boundary = {
        "left": ii == 0,
        "right": ii == nx,
        "bottom": jj == 0,
        "top": jj == ny,
    }
    return Mesh(nx, ny, L1, L2, nodes, triangles, boundary)


def _geometry(mesh: Mesh):
    """Signed areas and gradients of the three barycentric functions per triangle."""
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                  - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    # grad(lambda_k) = (y_{k+1} - y_{k+2}, x_{k+2} - x_{k+1}) / (2 area)
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([gx, gy], axis=2) / (2.0 * area)[:, None, None]  # (T, 3, 2)
    return area, grads


def triangle_areas(mesh: Mesh) -> np.ndarray:
    return _geometry(mesh)[0]


def _scatter(rows_idx: np.ndarray, cols_idx: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    A = sp.coo_matrix((local.ravel(), (rows_idx.ravel(), cols_idx.ravel())), shape=(n, n))
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _element_pairs(dofs: np.ndarray):
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1)
    cols = np.tile(dofs, (1, k))
    return rows, cols


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    area, _ = _geometry(mesh)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = area[:, None, None] * ref[None]
    rows, cols = _element_pairs(mesh.triangles)
    return _scatter(rows, cols, local, mesh.num_nodes)


def centroid_values(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    return np.asarray(nodal, dtype=float)[mesh.triangles].mean(axis=1)


def _as_nodal_scalar(mesh: Mesh, coeff, name: str) -> np.ndarray:
    c = np.asarray(coeff, dtype=float)
    if c.ndim == 0:
        return np.full(mesh.num_nodes, float(c))
    if c.shape != (mesh.num_nodes,):
        raise ValueError(f"{name} must be a scalar nodal field of length {mesh.num_nodes}, "
                         f"got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError(f"{name} has non-finite entries")
    return c


def assemble_stiffness(mesh: Mesh, coeff=1.0) -> sp.csr_matrix:
    """Matrix of int c grad(phi_i).grad(phi_j) with c taken at triangle centroids."""
    c = centroid_values(mesh, _as_nodal_scalar(mesh, coeff, "coeff"))
    area, grads = _geometry(mesh)
    local = (c * area)[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    rows, cols = _element_pairs(mesh.triangles)
    return _scatter(rows, cols, local, mesh.num_nodes)


def lame_parameters(E, nu: float):
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def assemble_elasticity_stiffness(mesh: Mesh, youngs, nu: float = 0.25) -> sp.csr_matrix:
    """Plane-strain isotropic elasticity on component-blocked displacement dofs."""
    if not 0.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {nu}")
    E = _as_nodal_scalar(mesh, youngs, "youngs")
    if np.any(E <= 0):
        raise ValueError("Young's modulus must be positive everywhere")
    lam, mu = lame_parameters(centroid_values(mesh, E), nu)
    area, grads = _geometry(mesh)
    T = mesh.num_triangles
    # strain-displacement matrix for dof order (u1 at v0..v2, u2 at v0..v2),
    # Voigt strain (e11, e22, 2 e12)
    B = np.zeros((T, 3, 6))
    B[:, 0, 0:3] = grads[:, :, 0]
    B[:, 1, 3:6] = grads[:, :, 1]
    B[:, 2, 0:3] = grads[:, :, 1]
    B[:, 2, 3:6] = grads[:, :, 0]
    D = np.zeros((T, 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = lam + 2.0 * mu
    D[:, 0, 1] = D[:, 1, 0] = lam
    D[:, 2, 2] = mu
    local = area[:, None, None] * np.einsum("tai,tab,tbj->tij", B, D, B)
    n = mesh.num_nodes
    dofs = np.hstack([mesh.triangles, mesh.triangles + n])
    rows, cols = _element_pairs(dofs)
    return _scatter(rows, cols, local, 2 * n)


# degree-2 rule on the reference triangle (edge midpoints), weights sum to 1
_TRI_QUAD_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
_TRI_QUAD_W = np.full(3, 1.0 / 3.0)


def load_vector(mesh: Mesh, f) -> np.ndarray:
    """Vector of int f phi_i dx; ``f`` maps an (n, 2) array of points to values."""
    area, _ = _geometry(mesh)
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    qp = np.einsum("qk,tkd->tqd", _TRI_QUAD_BARY, p)  # (T, Q, 2)
    fq = np.asarray(f(qp.reshape(-1, 2)), dtype=float).reshape(qp.shape[:2])
    local = area[:, None] * np.einsum("q,tq,qk->tk", _TRI_QUAD_W, fq, _TRI_QUAD_BARY)
    b = np.zeros(mesh.num_nodes)
    np.add.at(b, mesh.triangles, local)
    return b


_GAUSS3_X, _GAUSS3_W = np.polynomial.legendre.leggauss(3)


def boundary_edges(mesh: Mesh, side: str) -> np.ndarray:
    """Edges along one side of the rectangle as (n_edges, 2) node pairs."""
    nx, ny = mesh.nx, mesh.ny
    if side == "bottom":
        ids = np.arange(nx + 1)
    elif side == "top":
        ids = ny * (nx + 1) + np.arange(nx + 1)
    elif side == "left":
        ids = np.arange(ny + 1) * (nx + 1)
    elif side == "right":
        ids = np.arange(ny + 1) * (nx + 1) + nx
    else:
        raise ValueError(f"unknown side {side!r}")
    return np.column_stack([ids[:-1], ids[1:]])


def boundary_load(mesh: Mesh, side: str, g) -> np.ndarray:
    """Vector of int_side g phi_i ds using 3-point Gauss on every edge."""
    edges = boundary_edges(mesh, side)
    a, b = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
    length = np.linalg.norm(b - a, axis=1)
    t = 0.5 * (_GAUSS3_X + 1.0)  # (3,) in [0, 1]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    gq = np.asarray(g(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    w = 0.5 * _GAUSS3_W * gq * length[:, None]  # (E, 3)
    out = np.zeros(mesh.num_nodes)
    np.add.at(out, edges[:, 0], (w * (1.0 - t)).sum(axis=1))
    np.add.at(out, edges[:, 1], (w * t).sum(axis=1))
    return out


def apply_dirichlet(A: sp.spmatrix, b: np.ndarray, nodes, values):
    """Symmetric elimination of prescribed dofs.  Returns new (A, b)."""
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    n = A.shape[0]
    if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
        raise IndexError(f"constrained index out of range for operator of size {n}")
    A = sp.csr_matrix(A, copy=True)
    b = np.array(b, dtype=float, copy=True)
    if nodes.size == 0:
        return A, b
    vals = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape)
    fixed = np.zeros(n, dtype=bool)
    fixed[nodes] = True
    g = np.zeros(n)
    g[nodes] = vals
    b -= A @ g
    keep = sp.diags((~fixed).astype(float))
    A = (keep @ A @ keep + sp.diags(fixed.astype(float))).tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    b[fixed] = g[fixed]
    return A, b


def solve_spd(A: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Jacobi-preconditioned CG with an iteration cap of 50 * dim."""
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("operator has a nonpositive diagonal entry", float("nan"))
    M = sp.diags(1.0 / d)
    # tighter internal target so the true residual also meets rtol
    x, info = cg(A, b, rtol=0.1 * rtol, atol=0.0, maxiter=50 * n, M=M)
    res = np.linalg.norm(A @ x - b) / max(bnorm, np.finfo(float).tiny)
    if not np.isfinite(res) or res > rtol:
        raise SolverError(f"CG did not converge (info={info})", res)
    return x


def solve_dirichlet(A: sp.spmatrix, b: np.ndarray, nodes, values) -> np.ndarray:
    """Solve A x = b with x[nodes] = values exactly; CG runs on the free dofs only."""
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    n = A.shape[0]
    if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
        raise IndexError(f"constrained index out of range for operator of size {n}")
    x = np.zeros(n)
    x[nodes] = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape)
    free = np.ones(n, dtype=bool)
    free[nodes] = False
    if free.any():
        A = sp.csr_matrix(A)
        rhs = np.asarray(b, dtype=float)[free] - A[free][:, ~free] @ x[~free]
        x[free] = solve_spd(A[free][:, free], rhs)
    return x


def locate_points(mesh: Mesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric weights for each point."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    hx, hy = mesh.L1 / mesh.nx, mesh.L2 / mesh.ny
    tol1, tol2 = SNAP_TOL * max(mesh.L1, 1.0), SNAP_TOL * max(mesh.L2, 1.0)
    bad = ((pts[:, 0] < -tol1) | (pts[:, 0] > mesh.L1 + tol1)
           | (pts[:, 1] < -tol2) | (pts[:, 1] > mesh.L2 + tol2))
    if np.any(bad):
        p = pts[np.argmax(bad)]
        raise OutOfDomainError(f"point ({p[0]!r}, {p[1]!r}) lies outside "
                               f"[0, {mesh.L1}] x [0, {mesh.L2}]")
    x = np.clip(pts[:, 0], 0.0, mesh.L1)
    y = np.clip(pts[:, 1], 0.0, mesh.L2)
    ci = np.clip(np.floor(x / hx).astype(np.int64), 0, mesh.nx - 1)
    cj = np.clip(np.floor(y / hy).astype(np.int64), 0, mesh.ny - 1)
    fx = np.clip(x / hx - ci, 0.0, 1.0)
    fy = np.clip(y / hy - cj, 0.0, 1.0)
    upper = fy > fx
    cell = cj * mesh.nx + ci
    tri = 2 * cell + upper
    # lower: (n0, n1, n2) -> (1 - fx, fx - fy, fy); upper: (n0, n2, n3) -> (1 - fy, fx, fy - fx)
    bary = np.where(
        upper[:, None],
        np.column_stack([1.0 - fy, fx, fy - fx]),
        np.column_stack([1.0 - fx, fx - fy, fy]),
    )
    return tri, bary


def interpolation_matrix(mesh: Mesh, points) -> sp.csr_matrix:
    """Sparse (n_points, n_nodes) operator of P1 evaluation at ``points``."""
    tri, bary = locate_points(mesh, points)
    n = tri.shape[0]
    rows = np.repeat(np.arange(n), 3)
    cols = mesh.triangles[tri].ravel()
    P = sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(n, mesh.num_nodes))
    P.sum_duplicates()
    return P


def interpolate_at_points(mesh: Mesh, field_values, points) -> np.ndarray:
    """Evaluate a P1 field at points.  Scalar fields give shape (n,), vector
    fields (component-blocked) give shape (n, components)."""
    v = np.asarray(field_values, dtype=float)
    N = mesh.num_nodes
    if v.ndim != 1 or v.size % N:
        raise ValueError(f"field length {v.size} is not a multiple of node count {N}")
    comps = v.size // N
    P = interpolation_matrix(mesh, points)
    out = np.column_stack([P @ v[c * N:(c + 1) * N] for c in range(comps)])
    return out[:, 0] if comps == 1 else out
