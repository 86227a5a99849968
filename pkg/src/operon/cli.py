"""``operon`` command-line driver: gen, train, eval, truth, mcmc, spectrum.

Every command takes ``--config file.json`` (flat dotted keys) plus flags that
map one-to-one onto those keys; flags win over the file.  The fully resolved
configuration is written to ``<out>/config.json`` and can be fed back with
``--config`` to repeat the run.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np
import torch

from . import config as C
from .data import GenerationError, generate, read_dataset, split, write_dataset
from .dimred import fit_normalizer, write_spectrum
from .fem import SolverError, build_rect_mesh
from .mcmc import (TRUTH_VERSION, ChainAborted, ChainConfig, Observation, Observer,
                   fem_forward, make_observation, observation_grid, run_chain,
                   surrogate_forward, synthetic_truth)
from .models import make_model
from .nets import TrainLog, load_optimizer, make_adam, read_meta
from .operators import (DeepONet, Fno, GridTransfer, MeshMismatch, PcaNet, deeponet_train,
                        fno_grid_data, fno_train, load_model, pcanet_train, relative_l2_errors,
                        save_model)
from .prior import TransformParams, build_prior, transform_lognormal

log = logging.getLogger("operon")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# flag -> dotted configuration key
FLAGS = {
    "--problem": "problem", "--arch": "arch", "--seed": "seed",
    "--nx": "mesh.nx", "--ny": "mesh.ny", "--L1": "mesh.L1", "--L2": "mesh.L2",
    "--a-c": "prior.a_c", "--b-c": "prior.b_c", "--c-c": "prior.c_c",
    "--alpha-m": "prior.alpha_m", "--beta-m": "prior.beta_m",
    "--n": "data.N", "--n-train": "data.n_train", "--n-test": "data.n_test",
    "--depth": "net.depth", "--width": "net.width", "--rm": "net.r_m", "--ru": "net.r_u",
    "--ntr": "net.n_tr", "--dh": "net.d_h", "--layers": "net.layers", "--kmax": "net.k_max",
    "--n1": "net.n1", "--n2": "net.n2",
    "--epochs": "train.epochs", "--lr": "train.lr", "--batch": "train.batch",
    "--weight-decay": "train.weight_decay",
    "--chain-length": "mcmc.k_max", "--burn": "mcmc.k_burn", "--beta": "mcmc.beta",
    "--noise-fraction": "mcmc.noise_fraction", "--forward": "mcmc.forward",
    "--truth-seed": "mcmc.truth_seed",
    "--data": "paths.data", "--model": "paths.model", "--truth": "paths.truth",
    "--resume": "paths.resume", "--out": "paths.out",
}

COMMANDS = ("gen", "train", "eval", "truth", "mcmc", "spectrum")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--threads", type=int, default=None, help="cap on torch worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic torch kernels, one thread unless --threads is given")
    for flag, key in FLAGS.items():
        common.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.split(".")[-1].upper(),
                            help=f"sets {key}")
    parser = argparse.ArgumentParser(prog="operon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a (m, u) dataset",
        "train": "train a surrogate on a dataset",
        "eval": "per-sample test errors of a trained surrogate",
        "truth": "synthetic ground truth and observations for inversion",
        "mcmc": "pCN posterior sampling with FEM or surrogate forward",
        "spectrum": "singular values of the normalized training data",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


# --- helpers ---------------------------------------------------------------

def _resolve_config(args, inherit: dict | None = None) -> C.RunConfig:
    """File, then values inherited from input artifacts, then explicit flags."""
    flat = C.load_json(args.config) if args.config else {}
    explicit = {k: v for k, v in vars(args).items() if k in C.KEYS}
    cfg = C.from_flat(flat)
    for key, value in (inherit or {}).items():
        if key in explicit and C._coerce(key, explicit[key]) != value:
            raise UsageError(f"{key}={explicit[key]} conflicts with the input artifact ({value})")
        if key not in explicit:
            C.from_flat({key: value}, cfg)
    C.from_flat(explicit, cfg)
    cfg = C.resolve(cfg)
    if not cfg.paths.out:
        raise UsageError("--out is required")
    return cfg


def _echo(cfg: C.RunConfig, command: str) -> str:
    out = cfg.paths.out
    os.makedirs(out, exist_ok=True)
    flat = C.flatten(cfg)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(flat, fh, indent=2, sort_keys=True)
    log.info("%s: resolved configuration written to %s", command, os.path.join(out, "config.json"))
    return out


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _require(path, what: str) -> str:
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} {path!r} does not exist")
    return path


def _inherit_from_dataset(meta: dict) -> dict:
    mesh = meta["mesh"]
    return {"problem": meta["problem"], "mesh.nx": mesh["nx"], "mesh.ny": mesh["ny"],
            "mesh.L1": mesh["L1"], "mesh.L2": mesh["L2"]}


def _setup(cfg: C.RunConfig):
    mesh = build_rect_mesh(cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.L1, cfg.mesh.L2)
    prior = build_prior(mesh, cfg.prior.a_c, cfg.prior.b_c, cfg.prior.c_c, seed=cfg.seed)
    model = make_model(cfg.problem, mesh, prior, TransformParams(cfg.prior.alpha_m, cfg.prior.beta_m))
    return mesh, prior, model


def read_log_csv(path) -> TrainLog:
    lg = TrainLog()
    with open(path) as fh:
        for row in csv.DictReader(fh):
            lg.rows.append((int(row["epoch"]), float(row["train_mse"]), float(row["test_mse"])))
    if lg.rows and lg.rows[0][0] == 0:
        lg.initial_train_mse = lg.rows[0][1]
    return lg


def evaluate(predict_fn, X, Y, rows) -> tuple[list, dict]:
    """Per-sample relative l2 errors (percent) and their summary."""
    errs = relative_l2_errors(predict_fn(X), Y)
    table = [(int(i), float(e)) for i, e in zip(rows, errs)]
    summary = {"n": len(table), "median_rel_l2_percent": float(np.median(errs)),
               "mean_rel_l2_percent": float(np.mean(errs))}
    return table, summary


# --- commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out = _echo(cfg, "gen")
    _, _, model = _setup(cfg)
    t0 = time.perf_counter()
    ds = generate(model, cfg.data.N, seed=cfg.seed)
    split(ds, cfg.data.n_train, cfg.data.n_test, seed=cfg.seed)
    write_dataset(out, ds)
    log.info("gen: %d samples in %.1fs -> %s", ds.N, time.perf_counter() - t0, out)
    return EXIT_OK


def _build_surrogate(cfg: C.RunConfig, p_m: int, p_u: int, comps: int, mesh_params: dict):
    n = cfg.net
    if cfg.arch == "deeponet":
        return DeepONet(p_m, n.n_tr, comps, n.width, n.depth, mesh_params=mesh_params)
    if cfg.arch == "pcanet":
        return PcaNet(p_m, p_u, n.r_m, n.r_u, n.width, n.depth, mesh_params=mesh_params)
    return Fno(n.n1, n.n2, comps, n.d_h, n.layers, n.k_max, mesh_params=mesh_params)


def cmd_train(args) -> int:
    pre = C.load_json(args.config) if args.config else {}
    data_dir = _require(getattr(args, "paths.data", None) or pre.get("paths.data"), "--data")
    ds, _ = read_dataset(data_dir)
    cfg = _resolve_config(args, _inherit_from_dataset(ds.meta))
    out = _echo(cfg, "train")
    Xtr, Ytr = ds.train()
    Xte, Yte = ds.test()
    if Xtr.shape[0] < 2:
        raise UsageError("dataset has fewer than two training rows; regenerate with a split")
    comps = int(ds.meta["components"])
    torch.manual_seed(cfg.seed)

    start, lg, optimizer = 1, None, None
    if cfg.paths.resume:
        resume = _require(cfg.paths.resume, "--resume")
        model = load_model(resume)
        meta = read_meta(resume)
        if meta["arch"] != cfg.arch:
            raise UsageError(f"checkpoint holds a {meta['arch']} model, --arch is {cfg.arch}")
        start = int(meta["epoch"]) + 1
        optimizer = make_adam(model.parameters(), cfg.train.lr, cfg.train.weight_decay)
        load_optimizer(resume, model, optimizer, meta)
        lg = read_log_csv(os.path.join(resume, "loss.csv"))
        model.train()
    else:
        model = _build_surrogate(cfg, Xtr.shape[1], Ytr.shape[1], comps, ds.meta["mesh"])

    kw = dict(epochs=cfg.train.epochs, lr=cfg.train.lr, batch_size=cfg.train.batch, seed=cfg.seed,
              weight_decay=cfg.train.weight_decay, optimizer=optimizer, start_epoch=start, log=lg)
    t0 = time.perf_counter()
    if cfg.arch == "deeponet":
        mesh = build_rect_mesh(**ds.meta["mesh"])
        lg, optimizer = deeponet_train(model, Xtr, Ytr, Xte, Yte, coords=mesh.nodes, **kw)
    elif cfg.arch == "pcanet":
        lg, optimizer = pcanet_train(model, Xtr, Ytr, Xte, Yte, **kw)
    else:
        transfer = GridTransfer(build_rect_mesh(**ds.meta["mesh"]), cfg.net.n1, cfg.net.n2)
        Xg, Yg = fno_grid_data(model, transfer, Xtr, Ytr, fit=start == 1)
        Xgt, Ygt = fno_grid_data(model, transfer, Xte, Yte) if len(Xte) else (None, None)
        lg, optimizer = fno_train(model, Xg, Yg, Xgt, Ygt, **kw)
    elapsed = time.perf_counter() - t0
    if not np.isfinite(lg.final_train_mse):
        raise FloatingPointError("training diverged: final loss is not finite")

    save_model(out, model, {"epoch": cfg.train.epochs, "problem": cfg.problem}, optimizer)
    lg.write_csv(os.path.join(out, "loss.csv"))
    _write_json(os.path.join(out, "train_summary.json"), {
        "arch": cfg.arch, "initial_train_mse": lg.initial_train_mse,
        "final_train_mse": lg.final_train_mse, "epochs": cfg.train.epochs,
        "seconds": elapsed})
    log.info("train: %s loss %.3e -> %.3e in %.1fs", cfg.arch, lg.initial_train_mse,
             lg.final_train_mse, elapsed)
    return EXIT_OK


def cmd_eval(args) -> int:
    pre = C.load_json(args.config) if args.config else {}
    data_dir = _require(getattr(args, "paths.data", None) or pre.get("paths.data"), "--data")
    ds, _ = read_dataset(data_dir)
    cfg = _resolve_config(args, _inherit_from_dataset(ds.meta))
    model_dir = _require(cfg.paths.model, "--model")
    out = _echo(cfg, "eval")
    model = load_model(model_dir)
    mesh = build_rect_mesh(**ds.meta["mesh"])
    rows = ds.test_idx if ds.test_idx.size else np.arange(ds.N)
    table, summary = evaluate(lambda X: model.predict(X, mesh), ds.X[rows], ds.Y[rows], rows)
    summary["arch"] = model.arch
    with open(os.path.join(out, "errors.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "rel_l2_percent"])
        for i, e in table:
            w.writerow([i, repr(e)])
    _write_json(os.path.join(out, "summary.json"), summary)
    log.info("eval: %s median %.3f%% over %d samples", model.arch,
             summary["median_rel_l2_percent"], summary["n"])
    return EXIT_OK


def cmd_truth(args) -> int:
    cfg = _resolve_config(args)
    out = _echo(cfg, "truth")
    mesh, prior, model = _setup(cfg)
    w = synthetic_truth(mesh, cfg.mcmc.truth_seed)
    m = transform_lognormal(w, model.transform)
    u = model.solve_fwd(m)
    observer = Observer(mesh, observation_grid(mesh.L1, mesh.L2))
    obs = make_observation(lambda _: u, w, observer, model.components, cfg.mcmc.noise_fraction)
    arrays = {"w": w, "m": m, "u": u, "obs_points": obs.points, "obs_data": obs.data}
    for name, arr in arrays.items():
        np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(out, name + ".bin"))
    _write_json(os.path.join(out, "meta.json"), {
        "format_version": "1", "dtype": "f64", "byte_order": "little",
        "truth_version": TRUTH_VERSION, "truth_seed": cfg.mcmc.truth_seed,
        "problem": cfg.problem, "components": model.components, "mesh": mesh.params(),
        "prior": prior.config(), "transform": {"alpha_m": cfg.prior.alpha_m, "beta_m": cfg.prior.beta_m},
        "noise_fraction": cfg.mcmc.noise_fraction, "sigma_o": obs.sigma,
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()}})
    log.info("truth: d_o=%d sigma_o=%.4g -> %s", obs.d_o, obs.sigma, out)
    return EXIT_OK


def read_truth(directory) -> tuple[dict, dict]:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    arrays = {k: np.fromfile(os.path.join(directory, k + ".bin"), dtype="<f8").reshape(shape)
              for k, shape in meta["shapes"].items()}
    return meta, arrays


def cmd_mcmc(args) -> int:
    pre = C.load_json(args.config) if args.config else {}
    truth_dir = _require(getattr(args, "paths.truth", None) or pre.get("paths.truth"), "--truth")
    meta, arrays = read_truth(truth_dir)
    inherit = _inherit_from_dataset(meta)
    inherit.update({"prior.alpha_m": meta["transform"]["alpha_m"],
                    "prior.beta_m": meta["transform"]["beta_m"],
                    "prior.a_c": meta["prior"]["a_c"], "prior.b_c": meta["prior"]["b_c"],
                    "prior.c_c": meta["prior"]["c_c"]})
    cfg = _resolve_config(args, inherit)
    out = _echo(cfg, "mcmc")
    mesh, prior, model = _setup(cfg)
    observer = Observer(mesh, arrays["obs_points"])
    o = arrays["obs_data"]
    obs = Observation(arrays["obs_points"], o, cfg.mcmc.noise_fraction * float(np.mean(o)),
                      int(meta["components"]))

    if cfg.mcmc.forward == "fem":
        forward = fem_forward(model)
    else:
        model_dir = _require(cfg.paths.model, "--model")
        net = load_model(model_dir)
        if net.arch != cfg.mcmc.forward:
            raise UsageError(f"--forward {cfg.mcmc.forward} but {model_dir} holds a {net.arch} model")
        net.check_mesh(mesh)
        forward = surrogate_forward(net, model.transform)

    chain_cfg = ChainConfig(cfg.mcmc.k_max, cfg.mcmc.k_burn, cfg.mcmc.beta, None,
                            cfg.mcmc.forward, cfg.seed)
    t0 = time.perf_counter()
    code, aborted = EXIT_OK, None
    try:
        res = run_chain(chain_cfg, forward, prior, obs, observer,
                        trace_dir=os.path.join(out, "trace"), keep_samples=False,
                        meta={"forward": cfg.mcmc.forward, "model": cfg.paths.model,
                              "truth": truth_dir})
    except ChainAborted as exc:
        res, code, aborted = exc.result, EXIT_NUMERIC, str(exc)
    elapsed = time.perf_counter() - t0

    w_mean = res.posterior_mean
    report = {"forward": cfg.mcmc.forward, "sigma_o": obs.sigma, "seconds": elapsed,
              "iterations": int(res.costs.size), "aborted": aborted,
              "acceptance_rate": float(res.acceptance_rate[-1]) if res.costs.size else None,
              "final_cost": float(res.costs[-1]) if res.costs.size else None}
    if np.all(np.isfinite(w_mean)):
        m_mean = transform_lognormal(w_mean, model.transform)
        m_true = arrays["m"]
        report["posterior_mean_m_rel_l2_percent"] = float(
            100.0 * np.linalg.norm(m_mean - m_true) / np.linalg.norm(m_true))
        np.ascontiguousarray(w_mean, dtype="<f8").tofile(os.path.join(out, "posterior_mean_w.bin"))
        np.ascontiguousarray(m_mean, dtype="<f8").tofile(os.path.join(out, "posterior_mean_m.bin"))
    _write_json(os.path.join(out, "report.json"), report)
    log.info("mcmc: %s acceptance %.3f, m error %s%% in %.1fs", cfg.mcmc.forward,
             report["acceptance_rate"] or 0.0, report.get("posterior_mean_m_rel_l2_percent"), elapsed)
    return code


def cmd_spectrum(args) -> int:
    pre = C.load_json(args.config) if args.config else {}
    data_dir = _require(getattr(args, "paths.data", None) or pre.get("paths.data"), "--data")
    ds, _ = read_dataset(data_dir)
    cfg = _resolve_config(args, _inherit_from_dataset(ds.meta))
    out = _echo(cfg, "spectrum")
    X, Y = ds.train() if ds.train_idx.size >= 2 else (ds.X, ds.Y)
    for name, A in (("inputs", X), ("outputs", Y)):
        s = np.linalg.svd(fit_normalizer(A).apply(A), compute_uv=False)
        write_spectrum(os.path.join(out, f"spectrum_{name}.csv"), s)
    log.info("spectrum: wrote input and output spectra to %s", out)
    return EXIT_OK


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "truth": cmd_truth,
            "mcmc": cmd_mcmc, "spectrum": cmd_spectrum}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(args.threads or 1)
    elif args.threads:
        torch.set_num_threads(args.threads)
    try:
        return HANDLERS[args.command](args)
    except (UsageError, C.ConfigError, MeshMismatch, FileNotFoundError, KeyError) as exc:
        print(f"operon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, GenerationError, ChainAborted, OverflowError, FloatingPointError) as exc:
        print(f"operon {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
