"""DeepONet, PCANet and FNO surrogates with a uniform nodal ``predict``."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as tnn
import torch.nn.functional as F

from . import nets
from .dimred import fit_normalizer, fit_projector
from .fem import Mesh, build_rect_mesh, interpolation_matrix
from .nets import DTYPE, Mlp, as_tensor, mse

ARCHS = ("deeponet", "pcanet", "fno")


def relative_l2_errors(pred, true) -> np.ndarray:
    """Per-row relative l2 error in percent."""
    pred, true = np.atleast_2d(pred), np.atleast_2d(true)
    return 100.0 * np.linalg.norm(pred - true, axis=1) / np.linalg.norm(true, axis=1)


class MeshMismatch(ValueError):
    pass


def _check_input(m, p_m: int) -> tuple[np.ndarray, bool]:
    m = np.asarray(m, dtype=float)
    single = m.ndim == 1
    m = np.atleast_2d(m)
    if m.shape[1] != p_m:
        raise MeshMismatch(f"model expects {p_m} nodal values per input, got {m.shape[1]}")
    return m, single


class _Surrogate(tnn.Module):
    arch = ""

    def __init__(self, mesh_params: dict | None):
        super().__init__()
        self.mesh_params = dict(mesh_params) if mesh_params else None

    def check_mesh(self, mesh: Mesh | None) -> None:
        if mesh is not None and self.mesh_params is not None and mesh.params() != self.mesh_params:
            raise MeshMismatch(f"model was trained on mesh {self.mesh_params}, got {mesh.params()}")

    def hyperparams(self) -> dict:
        raise NotImplementedError

    def checkpoint_meta(self) -> dict:
        return {"arch": self.arch, "mesh": self.mesh_params, "hyperparams": self.hyperparams()}


# --- DeepONet ----------------------------------------------------------------

def deeponet_build_data(X, Y, mesh: Mesh, components: int = 1):
    """Branch inputs, trunk coordinates (mesh nodes) and targets."""
    X, Y = np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Y, float))
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} input samples but {Y.shape[0]} output samples")
    if Y.shape[1] != components * mesh.num_nodes:
        raise ValueError(f"outputs must have {components} x {mesh.num_nodes} columns")
    return X, mesh.nodes.copy(), Y


class DeepONet(_Surrogate):
    """u_c(x) = sum_k alpha_{k + c N_tr}(m) phi_k(x) + b_c, blocks ordered by component."""

    arch = "deeponet"

    def __init__(self, p_m: int, n_tr: int = 100, d_o: int = 1, width: int = 128,
                 depth: int = 4, coord_dim: int = 2, mesh_params: dict | None = None):
        super().__init__(mesh_params)
        self.p_m, self.n_tr, self.d_o = p_m, n_tr, d_o
        self.width, self.depth, self.coord_dim = width, depth, coord_dim
        self.branch = Mlp(p_m, width, d_o * n_tr, depth)
        self.trunk = Mlp(coord_dim, width, n_tr, depth)
        self.bias = tnn.Parameter(torch.ones(d_o, dtype=DTYPE))
        self.register_buffer("in_mean", torch.zeros(p_m, dtype=DTYPE))
        self.register_buffer("in_scale", torch.ones(p_m, dtype=DTYPE))
        self.register_buffer("coords", torch.zeros(0, coord_dim, dtype=DTYPE))

    def hyperparams(self):
        return {"p_m": self.p_m, "n_tr": self.n_tr, "d_o": self.d_o, "width": self.width,
                "depth": self.depth, "coord_dim": self.coord_dim}

    def set_normalization(self, X_train) -> None:
        nz = fit_normalizer(X_train)
        self.in_mean.copy_(as_tensor(nz.mean))
        self.in_scale.copy_(as_tensor(nz.std + nz.tol))

    def set_coords(self, coords) -> None:
        self.coords = as_tensor(coords).clone()

    def normalize(self, m: torch.Tensor) -> torch.Tensor:
        return (m - self.in_mean) / self.in_scale

    def forward(self, m_hat: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        alpha = self.branch(m_hat)  # (B, d_o * n_tr)
        phi = self.trunk(coords, final_act=True)  # (N_x, n_tr)
        alpha = alpha.reshape(alpha.shape[0], self.d_o, self.n_tr)
        out = torch.einsum("bck,xk->bcx", alpha, phi) + self.bias[None, :, None]
        return out.reshape(out.shape[0], -1)

    @torch.no_grad()
    def predict(self, m, mesh: Mesh | None = None) -> np.ndarray:
        self.check_mesh(mesh)
        m, single = _check_input(m, self.p_m)
        out = self(self.normalize(as_tensor(m)), self.coords).numpy()
        return out[0] if single else out


def deeponet_forward(model: DeepONet, m_batch, coords) -> torch.Tensor:
    return model(model.normalize(as_tensor(m_batch)), as_tensor(coords))


def deeponet_objective(model: DeepONet, X, Y) -> float:
    """(1 / (N_m N_x)) sum_I sum_J |Y_IJ - prediction_IJ|^2."""
    with torch.no_grad():
        pred = deeponet_forward(model, X, model.coords).numpy()
    return float(np.mean((np.asarray(Y) - pred) ** 2))


def deeponet_train(model: DeepONet, X_train, Y_train, X_test=None, Y_test=None,
                   coords=None, epochs: int = 1000, lr: float = 1e-3, batch_size: int = 20,
                   seed: int = 0, **kw):
    if coords is not None:
        model.set_coords(coords)
    if kw.get("start_epoch", 1) == 1:
        model.set_normalization(X_train)
    Xtr = model.normalize(as_tensor(X_train))
    Ytr = as_tensor(Y_train)
    Xte = model.normalize(as_tensor(X_test)) if X_test is not None and len(X_test) else None
    Yte = as_tensor(Y_test) if Xte is not None else None
    coords_t = model.coords

    def batch_loss(idx):
        return mse(model(Xtr[idx], coords_t), Ytr[idx])

    @torch.no_grad()
    def full_loss(split):
        if split == "train":
            return mse(model(Xtr, coords_t), Ytr).item()
        return float("nan") if Xte is None else mse(model(Xte, coords_t), Yte).item()

    return nets.train_loop(model.parameters(), batch_loss, Xtr.shape[0], full_loss, epochs,
                           lr, batch_size, seed, **kw)


# --- PCANet ------------------------------------------------------------------

class PcaNet(_Surrogate):
    """Normalize, project to r_m, MLP to r_u, lift, denormalize."""

    arch = "pcanet"

    def __init__(self, p_m: int, p_u: int, r_m: int = 100, r_u: int = 100, width: int = 128,
                 depth: int = 4, mesh_params: dict | None = None):
        super().__init__(mesh_params)
        self.p_m, self.p_u, self.r_m, self.r_u = p_m, p_u, r_m, r_u
        self.width, self.depth = width, depth
        self.core = Mlp(r_m, width, r_u, depth)
        for name, n in (("in_mean", p_m), ("in_scale", p_m), ("out_mean", p_u), ("out_scale", p_u)):
            self.register_buffer(name, torch.zeros(n, dtype=DTYPE))
        self.register_buffer("in_basis", torch.zeros(r_m, p_m, dtype=DTYPE))
        self.register_buffer("out_basis", torch.zeros(r_u, p_u, dtype=DTYPE))
        self.register_buffer("in_spectrum", torch.zeros(0, dtype=DTYPE))
        self.register_buffer("out_spectrum", torch.zeros(0, dtype=DTYPE))

    def hyperparams(self):
        return {"p_m": self.p_m, "p_u": self.p_u, "r_m": self.r_m, "r_u": self.r_u,
                "width": self.width, "depth": self.depth}

    def fit_reduction(self, X_train, Y_train) -> None:
        nx, ny = fit_normalizer(X_train), fit_normalizer(Y_train)
        px = fit_projector(nx.apply(X_train), self.r_m)
        py = fit_projector(ny.apply(Y_train), self.r_u)
        self.in_mean.copy_(as_tensor(nx.mean))
        self.in_scale.copy_(as_tensor(nx.std + nx.tol))
        self.out_mean.copy_(as_tensor(ny.mean))
        self.out_scale.copy_(as_tensor(ny.std + ny.tol))
        self.in_basis.copy_(as_tensor(px.basis))
        self.out_basis.copy_(as_tensor(py.basis))
        self.in_spectrum = as_tensor(px.singular_values).clone()
        self.out_spectrum = as_tensor(py.singular_values).clone()

    def reduce_inputs(self, m: torch.Tensor) -> torch.Tensor:
        return ((m - self.in_mean) / self.in_scale) @ self.in_basis.T

    def reduce_outputs(self, u: torch.Tensor) -> torch.Tensor:
        return ((u - self.out_mean) / self.out_scale) @ self.out_basis.T

    def lift_outputs(self, z: torch.Tensor) -> torch.Tensor:
        return (z @ self.out_basis) * self.out_scale + self.out_mean

    def forward(self, z_m: torch.Tensor) -> torch.Tensor:
        return self.core(z_m)

    def full_forward(self, m: torch.Tensor) -> torch.Tensor:
        return self.lift_outputs(self(self.reduce_inputs(m)))

    @torch.no_grad()
    def predict(self, m, mesh: Mesh | None = None) -> np.ndarray:
        self.check_mesh(mesh)
        m, single = _check_input(m, self.p_m)
        out = self.full_forward(as_tensor(m)).numpy()
        return out[0] if single else out


def pcanet_forward(model: PcaNet, m_batch) -> torch.Tensor:
    return model.full_forward(as_tensor(m_batch))


def pcanet_objective(model: PcaNet, X, Y) -> float:
    """(1 / N) sum_I || Ytilde_I - core(Xtilde_I) ||^2 in the reduced coordinates."""
    with torch.no_grad():
        zx = model.reduce_inputs(as_tensor(X))
        zy = model.reduce_outputs(as_tensor(Y)).numpy()
        pred = model(zx).numpy()
    return float(np.mean(np.sum((zy - pred) ** 2, axis=1)))


def pcanet_train(model: PcaNet, X_train, Y_train, X_test=None, Y_test=None, epochs: int = 1000,
                 lr: float = 1e-3, batch_size: int = 20, seed: int = 0, **kw):
    if kw.get("start_epoch", 1) == 1:
        model.fit_reduction(X_train, Y_train)
    with torch.no_grad():
        Ztr_in = model.reduce_inputs(as_tensor(X_train))
        Ztr_out = model.reduce_outputs(as_tensor(Y_train))
        has_test = X_test is not None and len(X_test)
        Zte_in = model.reduce_inputs(as_tensor(X_test)) if has_test else None
        Zte_out = model.reduce_outputs(as_tensor(Y_test)) if has_test else None

    def batch_loss(idx):
        return mse(model(Ztr_in[idx]), Ztr_out[idx])

    @torch.no_grad()
    def full_loss(split):
        if split == "train":
            return mse(model(Ztr_in), Ztr_out).item()
        return float("nan") if Zte_in is None else mse(model(Zte_in), Zte_out).item()

    return nets.train_loop(model.parameters(), batch_loss, Ztr_in.shape[0], full_loss, epochs,
                           lr, batch_size, seed, **kw)


# --- grid transfer -----------------------------------------------------------

class GridTransfer:
    """P1 evaluation on an n1 x n2 grid over the closed rectangle and bilinear
    evaluation of grid data back at mesh nodes.  Grid arrays are indexed [i, j]
    with i along x1."""

    def __init__(self, mesh: Mesh, n1: int = 51, n2: int = 51):
        if n1 < 2 or n2 < 2:
            raise ValueError("grid needs at least two points per axis")
        self.mesh, self.n1, self.n2 = mesh, n1, n2
        g1 = np.linspace(0.0, mesh.L1, n1)
        g2 = np.linspace(0.0, mesh.L2, n2)
        G1, G2 = np.meshgrid(g1, g2, indexing="ij")
        self.grid = np.stack([G1, G2], axis=-1)  # (n1, n2, 2)
        self.to_grid = interpolation_matrix(mesh, self.grid.reshape(-1, 2))
        self.to_fem = self._bilinear(mesh.nodes)

    def _bilinear(self, pts) -> sp.csr_matrix:
        h1 = self.mesh.L1 / (self.n1 - 1)
        h2 = self.mesh.L2 / (self.n2 - 1)
        i = np.clip(np.floor(pts[:, 0] / h1).astype(np.int64), 0, self.n1 - 2)
        j = np.clip(np.floor(pts[:, 1] / h2).astype(np.int64), 0, self.n2 - 2)
        s = np.clip(pts[:, 0] / h1 - i, 0.0, 1.0)
        t = np.clip(pts[:, 1] / h2 - j, 0.0, 1.0)
        n = pts.shape[0]
        rows = np.repeat(np.arange(n), 4)
        cols = np.column_stack([i * self.n2 + j, (i + 1) * self.n2 + j,
                                i * self.n2 + j + 1, (i + 1) * self.n2 + j + 1]).ravel()
        w = np.column_stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t]).ravel()
        P = sp.csr_matrix((w, (rows, cols)), shape=(n, self.n1 * self.n2))
        P.sum_duplicates()
        return P

    def coordinates(self) -> np.ndarray:
        return self.grid.copy()

    def fem_to_grid(self, fields) -> np.ndarray:
        """(…, comps * N) nodal -> (…, n1, n2, comps)."""
        f = np.asarray(fields, dtype=float)
        N = self.mesh.num_nodes
        comps = f.shape[-1] // N
        if comps * N != f.shape[-1]:
            raise ValueError(f"field length {f.shape[-1]} is not a multiple of {N}")
        lead = f.shape[:-1]
        f = f.reshape(-1, comps, N)
        g = np.stack([(self.to_grid @ f[:, c, :].T).T for c in range(comps)], axis=-1)
        return g.reshape(lead + (self.n1, self.n2, comps))

    def grid_to_fem(self, grids) -> np.ndarray:
        """(…, n1, n2, comps) -> (…, comps * N) component-blocked nodal."""
        g = np.asarray(grids, dtype=float)
        lead = g.shape[:-3]
        comps = g.shape[-1]
        g = g.reshape(-1, self.n1 * self.n2, comps)
        out = np.stack([(self.to_fem @ g[:, :, c].T).T for c in range(comps)], axis=1)
        return out.reshape(lead + (comps * self.mesh.num_nodes,))


def fem_to_grid(t: GridTransfer, field) -> np.ndarray:
    return t.fem_to_grid(field)


def grid_to_fem(t: GridTransfer, grid) -> np.ndarray:
    return t.grid_to_fem(grid)


# --- FNO ---------------------------------------------------------------------

def check_modes(n1: int, n2: int, k_max: int) -> None:
    if not 1 <= k_max <= min(n1 // 2 + 1, n2 // 2 + 1):
        raise ValueError(f"k_max={k_max} exceeds the Nyquist bound for a {n1}x{n2} grid")


def spectral_conv(z: torch.Tensor, w_low: torch.Tensor, w_high: torch.Tensor) -> torch.Tensor:
    """Fourier-space channel mixing on the retained modes.

    ``z`` is (B, d_in, n1, n2); each weight block is (d_in, d_out, k, k) complex.
    Rows [0, k) use ``w_low``, rows [n1 - k, n1) use ``w_high``; columns [0, k)
    of the half spectrum in both cases.
    """
    n1, n2 = z.shape[-2], z.shape[-1]
    k1, k2 = w_low.shape[-2], w_low.shape[-1]
    check_modes(n1, n2, max(k1, k2))
    z_ft = torch.fft.rfft2(z)
    out_ft = torch.zeros(z.shape[0], w_low.shape[1], n1, n2 // 2 + 1,
                         dtype=z_ft.dtype, device=z.device)
    out_ft[:, :, :k1, :k2] = torch.einsum("bixy,ioxy->boxy", z_ft[:, :, :k1, :k2], w_low)
    out_ft[:, :, n1 - k1:, :k2] = torch.einsum("bixy,ioxy->boxy", z_ft[:, :, n1 - k1:, :k2], w_high)
    return torch.fft.irfft2(out_ft, s=(n1, n2))


class FnoLayer(tnn.Module):
    def __init__(self, width: int, k_max: int, apply_act: bool = True):
        super().__init__()
        scale = 1.0 / (width * width)
        shape = (width, width, k_max, k_max)
        self.weights1 = tnn.Parameter(scale * torch.rand(*shape, dtype=torch.complex128))
        self.weights2 = tnn.Parameter(scale * torch.rand(*shape, dtype=torch.complex128))
        # pointwise affine path (a 1x1 convolution)
        self.w = tnn.Linear(width, width, dtype=DTYPE)
        self.apply_act = apply_act

    def forward(self, z):
        local = torch.einsum("oi,bixy->boxy", self.w.weight, z) + self.w.bias[None, :, None, None]
        z = spectral_conv(z, self.weights1, self.weights2) + local
        return F.gelu(z) if self.apply_act else z


class Fno(_Surrogate):
    """Lift (m, x1, x2) to d_h channels, L Fourier layers, project to d_o."""

    arch = "fno"

    def __init__(self, n1: int = 51, n2: int = 51, d_o: int = 1, width: int = 20,
                 n_layers: int = 3, k_max: int = 8, mesh_params: dict | None = None):
        super().__init__(mesh_params)
        check_modes(n1, n2, k_max)
        self.n1, self.n2, self.d_o = n1, n2, d_o
        self.width, self.n_layers, self.k_max = width, n_layers, k_max
        self.lift = tnn.Linear(3, width, dtype=DTYPE)
        self.layers = tnn.ModuleList(
            FnoLayer(width, k_max, apply_act=(l < n_layers - 1)) for l in range(n_layers))
        self.project = tnn.Linear(width, d_o, dtype=DTYPE)
        self.register_buffer("m_mean", torch.zeros(n1, n2, dtype=DTYPE))
        self.register_buffer("m_scale", torch.ones(n1, n2, dtype=DTYPE))
        self.register_buffer("u_mean", torch.zeros(n1, n2, d_o, dtype=DTYPE))
        self.register_buffer("u_scale", torch.ones(n1, n2, d_o, dtype=DTYPE))
        self._transfer = None

    def hyperparams(self):
        return {"n1": self.n1, "n2": self.n2, "d_o": self.d_o, "width": self.width,
                "n_layers": self.n_layers, "k_max": self.k_max}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.n1, self.n2, 3):
            raise ValueError(f"FNO expects (B, {self.n1}, {self.n2}, 3), got {tuple(x.shape)}")
        z = self.lift(x).permute(0, 3, 1, 2)
        for layer in self.layers:
            z = layer(z)
        return self.project(z.permute(0, 2, 3, 1))

    def set_normalization(self, m_grid, u_grid, tol: float = 1e-8) -> None:
        """Per-grid-point statistics over the training rows."""
        m = np.asarray(m_grid, float)
        u = np.asarray(u_grid, float)
        self.m_mean.copy_(as_tensor(m.mean(axis=0)))
        self.m_scale.copy_(as_tensor(m.std(axis=0) + tol))
        self.u_mean.copy_(as_tensor(u.mean(axis=0)))
        self.u_scale.copy_(as_tensor(u.std(axis=0) + tol))

    def make_inputs(self, m_grid, coords) -> torch.Tensor:
        """Stack normalized m (B, n1, n2) with grid coordinates (n1, n2, 2)."""
        m = (as_tensor(m_grid) - self.m_mean) / self.m_scale
        c = as_tensor(coords).expand(m.shape[0], self.n1, self.n2, 2)
        return torch.cat([m[..., None], c], dim=-1)

    def normalize_outputs(self, u_grid) -> torch.Tensor:
        return (as_tensor(u_grid) - self.u_mean) / self.u_scale

    def denormalize_outputs(self, y: torch.Tensor) -> torch.Tensor:
        return y * self.u_scale + self.u_mean

    @property
    def transfer(self) -> GridTransfer:
        if self._transfer is None:
            if self.mesh_params is None:
                raise MeshMismatch("FNO has no mesh metadata for grid transfer")
            mesh = build_rect_mesh(**self.mesh_params)
            self._transfer = GridTransfer(mesh, self.n1, self.n2)
        return self._transfer

    def attach_transfer(self, transfer: GridTransfer) -> None:
        self.mesh_params = transfer.mesh.params()
        self._transfer = transfer

    @torch.no_grad()
    def predict(self, m, mesh: Mesh | None = None) -> np.ndarray:
        self.check_mesh(mesh)
        t = self.transfer
        m, single = _check_input(m, t.mesh.num_nodes)
        m_grid = t.fem_to_grid(m)[..., 0]
        y = self(self.make_inputs(m_grid, t.grid))
        out = t.grid_to_fem(self.denormalize_outputs(y).numpy())
        return out[0] if single else out


def fno_forward(model: Fno, x) -> torch.Tensor:
    return model(as_tensor(x))


def fno_objective(model: Fno, X, Y) -> float:
    """(1 / (N n1 n2)) sum_I sum_jk |u^I_jk - F(m^I)_jk|^2 on normalized grid data."""
    with torch.no_grad():
        pred = model(as_tensor(X)).numpy()
    return float(np.sum((np.asarray(Y) - pred) ** 2) / (pred.shape[0] * model.n1 * model.n2))


def fno_train(model: Fno, X_train, Y_train, X_test=None, Y_test=None, epochs: int = 500,
              lr: float = 1e-3, batch_size: int = 20, seed: int = 0, **kw):
    """Train on already-normalized grid tensors X (N, n1, n2, 3), Y (N, n1, n2, d_o)."""
    Xtr, Ytr = as_tensor(X_train), as_tensor(Y_train)
    has_test = X_test is not None and len(X_test)
    Xte = as_tensor(X_test) if has_test else None
    Yte = as_tensor(Y_test) if has_test else None

    def batch_loss(idx):
        return mse(model(Xtr[idx]), Ytr[idx])

    @torch.no_grad()
    def full_loss(split):
        X, Y = (Xtr, Ytr) if split == "train" else (Xte, Yte)
        if X is None:
            return float("nan")
        total = sum(F.mse_loss(model(X[i:i + 64]), Y[i:i + 64], reduction="sum").item()
                    for i in range(0, X.shape[0], 64))
        return total / Y.numel()

    return nets.train_loop(model.parameters(), batch_loss, Xtr.shape[0], full_loss, epochs,
                           lr, batch_size, seed, **kw)


def fno_grid_data(model: Fno, transfer: GridTransfer, X_nodal, Y_nodal, fit: bool = False):
    """Grid tensors for FNO training; ``fit`` sets normalization from these rows."""
    m_grid = transfer.fem_to_grid(X_nodal)[..., 0]
    u_grid = transfer.fem_to_grid(Y_nodal)
    if fit:
        model.set_normalization(m_grid, u_grid)
        model.attach_transfer(transfer)
    with torch.no_grad():
        X = model.make_inputs(m_grid, transfer.grid)
        Y = model.normalize_outputs(u_grid)
    return X, Y


# --- uniform interface -------------------------------------------------------

def build_model(arch: str, hyperparams: dict, mesh_params: dict | None = None) -> _Surrogate:
    cls = {"deeponet": DeepONet, "pcanet": PcaNet, "fno": Fno}.get(arch)
    if cls is None:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    return cls(mesh_params=mesh_params, **hyperparams)


def predict(model: _Surrogate, m, mesh: Mesh | None = None) -> np.ndarray:
    return model.predict(m, mesh)


def save_model(directory, model: _Surrogate, extra: dict | None = None, optimizer=None) -> None:
    meta = model.checkpoint_meta()
    meta.update(extra or {})
    nets.save_checkpoint(directory, model, meta, optimizer)


def load_model(directory) -> _Surrogate:
    meta = nets.read_meta(directory)
    model = build_model(meta["arch"], meta["hyperparams"], meta.get("mesh"))
    # buffers whose size depends on the data are resized before loading
    shapes = {e["name"]: tuple(e["shape"]) for e in meta["params"]}
    for name, buf in list(model.named_buffers()):
        if name in shapes and tuple(buf.shape) != shapes[name]:
            setattr(model, name, torch.zeros(shapes[name], dtype=buf.dtype))
    nets.load_parameters(directory, model, meta)
    model.eval()
    return model
