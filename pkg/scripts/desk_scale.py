"""Desk-scale pipeline through the command-line interface.

Generates Poisson (or elasticity) data on a 20 x 20-cell mesh, trains the three
surrogates, evaluates them, builds a synthetic truth and runs FEM and surrogate
pCN chains.  Every step writes its resolved config next to its outputs.

    python3 scripts/desk_scale.py --out runs/desk [--problem linear_elasticity]
"""
import argparse
import json
import os
import sys

from operon.cli import main as operon

DESK_MESH = ["--nx", "20", "--ny", "20"]
DESK_NETS = {
    "pcanet": ["--epochs", "200"],
    "deeponet": ["--epochs", "200"],
    "fno": ["--epochs", "100", "--n1", "21", "--n2", "21", "--kmax", "6"],
}


def step(*args) -> None:
    code = operon([str(a) for a in args] + ["--deterministic"])
    if code != 0:
        sys.exit(f"step {args[0]} failed with exit code {code}")


def run(out: str, problem: str, chain: int, seed: int) -> dict:
    data = os.path.join(out, "data")
    step("gen", "--problem", problem, *DESK_MESH, "--n", 640, "--n-train", 512, "--n-test", 128,
         "--seed", seed, "--out", data)
    step("spectrum", "--data", data, "--out", os.path.join(out, "spectrum"))
    summary = {}
    for arch, extra in DESK_NETS.items():
        model = os.path.join(out, arch)
        step("train", "--data", data, "--arch", arch, *extra, "--seed", seed, "--out", model)
        step("eval", "--data", data, "--model", model, "--out", os.path.join(out, f"eval_{arch}"))
        with open(os.path.join(out, f"eval_{arch}", "summary.json")) as fh:
            summary[f"{arch}_median_percent"] = json.load(fh)["median_rel_l2_percent"]
    truth = os.path.join(out, "truth")
    step("truth", "--problem", problem, *DESK_MESH, "--out", truth)
    for forward in ("fem", *DESK_NETS):
        dest = os.path.join(out, f"mcmc_{forward}")
        args = ["--forward", forward] + (["--model", os.path.join(out, forward)] if forward != "fem" else [])
        step("mcmc", "--truth", truth, *args, "--chain-length", chain, "--burn", chain // 10,
             "--seed", seed, "--out", dest)
        with open(os.path.join(dest, "report.json")) as fh:
            summary[f"mcmc_{forward}_error_percent"] = json.load(fh)["posterior_mean_m_rel_l2_percent"]
    return summary


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--problem", default="poisson", choices=["poisson", "linear_elasticity"])
    ap.add_argument("--chain", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    result = run(a.out, a.problem, a.chain, a.seed)
    with open(os.path.join(a.out, "summary.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    print(json.dumps(result, indent=2))
