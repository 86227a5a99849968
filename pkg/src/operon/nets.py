"""Shared network substrate: MLP, MSE loss, Adam setup, step learning-rate
schedule, mini-batch training loop and the raw-blob checkpoint format.

Reverse-mode differentiation is torch autograd; everything runs in float64.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as tnn
import torch.nn.functional as F

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))


class Mlp(tnn.Module):
    """``depth`` affine layers with relu in between; optional relu on the output."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, depth: int = 4):
        super().__init__()
        if depth < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        # torch's default Linear init is U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias
        self.layers = tnn.ModuleList(
            tnn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        self.in_dim, self.hidden, self.out_dim, self.depth = in_dim, hidden, out_dim, depth

    def forward(self, x, final_act: bool = False):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MLP expects input width {self.in_dim}, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        x = self.layers[-1](x)
        return torch.relu(x) if final_act else x


def mlp_forward(m: Mlp, x, final_relu: bool = False) -> torch.Tensor:
    return m(as_tensor(x), final_act=final_relu)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def step_lr(epoch: int, base_lr: float, step_size: int = 100, gamma: float = 0.5) -> float:
    return base_lr * gamma ** (epoch // step_size)


def make_adam(params, lr: float = 1e-3, weight_decay: float = 1e-4) -> torch.optim.Adam:
    # torch's Adam adds weight_decay * p to the gradient (coupled L2)
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches for one epoch; the last partial batch is kept."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, train_mse, test_mse)
    initial_train_mse: float = float("nan")
    final_train_mse: float = float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_mse,test_mse\n")
            for e, tr, te in self.rows:
                fh.write(f"{e},{tr!r},{te!r}\n")


def train_loop(params, batch_loss: Callable[[np.ndarray], torch.Tensor], n_train: int,
               full_loss: Callable[[str], float], epochs: int, lr: float = 1e-3,
               batch_size: int = 20, seed: int = 0, weight_decay: float = 1e-4,
               optimizer: torch.optim.Adam | None = None, start_epoch: int = 1,
               log: TrainLog | None = None, callback=None) -> tuple[TrainLog, torch.optim.Adam]:
    """Adam with a step schedule over shuffled mini-batches.

    ``batch_loss(idx)`` returns the differentiable loss on training rows ``idx``;
    ``full_loss("train" | "test")`` returns the no-grad loss over a whole split
    (nan when the split is empty).
    """
    params = list(params)
    if optimizer is None:
        optimizer = make_adam(params, lr, weight_decay)
    if log is None:
        log = TrainLog()
    if start_epoch == 1:
        log.initial_train_mse = full_loss("train")
        log.rows.append((0, log.initial_train_mse, full_loss("test")))
    for epoch in range(start_epoch, epochs + 1):
        for group in optimizer.param_groups:
            group["lr"] = step_lr(epoch, lr)
        losses = []
        for idx in batch_order(n_train, batch_size, seed, epoch):
            optimizer.zero_grad()
            loss = batch_loss(idx)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        log.rows.append((epoch, float(np.mean(losses)), full_loss("test")))
        if callback is not None:
            callback(epoch, optimizer, log)
    log.final_train_mse = full_loss("train")
    return log, optimizer


# --- checkpoint blobs -------------------------------------------------------

def _tensor_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().cpu()
    if t.is_complex():
        t = torch.view_as_real(t)
    return t.to(torch.float64).contiguous().numpy().astype("<f8").tobytes()


def _blob_entries(tensors: dict) -> list[dict]:
    return [{"name": k, "shape": list(v.shape), "complex": bool(v.is_complex())}
            for k, v in tensors.items()]


def write_blob(path, tensors: dict) -> list[dict]:
    with open(path, "wb") as fh:
        for v in tensors.values():
            fh.write(_tensor_bytes(v))
    return _blob_entries(tensors)


def read_blob(path, entries: list[dict]) -> dict:
    raw = np.fromfile(path, dtype="<f8")
    out, pos = {}, 0
    for e in entries:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * (2 if e["complex"] else 1)
        arr = raw[pos:pos + n].astype(np.float64)
        pos += n
        if e["complex"]:
            t = torch.view_as_complex(torch.from_numpy(arr.reshape(shape + (2,)).copy()))
        else:
            t = torch.from_numpy(arr.reshape(shape).copy())
        out[e["name"]] = t
    if pos != raw.size:
        raise ValueError(f"{path}: expected {pos} values, found {raw.size}")
    return out


def save_checkpoint(directory, module: tnn.Module, meta: dict,
                    optimizer: torch.optim.Adam | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = dict(meta)
    meta["format_version"] = "1"
    meta["dtype"] = "f64"
    meta["byte_order"] = "little"
    meta["params"] = write_blob(os.path.join(directory, "params.bin"), module.state_dict())
    if optimizer is not None:
        names = [n for n, _ in module.named_parameters()]
        moments, steps = {}, []
        for name, p in zip(names, _optimizer_params(optimizer)):
            st = optimizer.state.get(p, {})
            if "exp_avg" in st:
                moments[name + ".exp_avg"] = st["exp_avg"]
                moments[name + ".exp_avg_sq"] = st["exp_avg_sq"]
                steps.append(int(st["step"]))
        meta["optimizer"] = {
            "entries": write_blob(os.path.join(directory, "optimizer.bin"), moments),
            "step": steps[0] if steps else 0,
        }
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _optimizer_params(optimizer):
    return [p for g in optimizer.param_groups for p in g["params"]]


def read_meta(directory) -> dict:
    with open(os.path.join(directory, "meta.json")) as fh:
        return json.load(fh)


def load_parameters(directory, module: tnn.Module, meta: dict | None = None) -> None:
    meta = meta or read_meta(directory)
    state = read_blob(os.path.join(directory, "params.bin"), meta["params"])
    module.load_state_dict(state)


def load_optimizer(directory, module: tnn.Module, optimizer: torch.optim.Adam,
                   meta: dict | None = None) -> None:
    meta = meta or read_meta(directory)
    opt = meta.get("optimizer")
    if not opt or not opt["entries"]:
        return
    blobs = read_blob(os.path.join(directory, "optimizer.bin"), opt["entries"])
    names = [n for n, _ in module.named_parameters()]
    for name, p in zip(names, _optimizer_params(optimizer)):
        optimizer.state[p] = {
            "step": torch.tensor(float(opt["step"]), dtype=torch.float32),
            "exp_avg": blobs[name + ".exp_avg"].to(p.dtype),
            "exp_avg_sq": blobs[name + ".exp_avg_sq"].to(p.dtype),
        }
