import csv
import json
import os

import numpy as np
import pytest

from operon import cli
from operon.data import read_dataset

SMALL_NET = ["--rm", "8", "--ru", "8", "--width", "16", "--depth", "2", "--batch", "8"]


def run(*args) -> int:
    return cli.main([str(a) for a in args])


def _bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "ds"
    assert run("gen", "--problem", "poisson", "--n", 64, "--seed", 7, "--nx", 20, "--ny", 20,
               "--deterministic", "--out", out) == 0
    return out


def test_gen_shapes_and_echo(dataset):
    ds, _ = read_dataset(dataset)
    assert ds.X.shape == (64, 441)
    assert ds.Y.shape == (64, 441)
    cfg = json.loads((dataset / "config.json").read_text())
    assert cfg["data.N"] == 64 and cfg["mesh.nx"] == 20 and cfg["seed"] == 7
    # defaults are resolved in the echo, not left as null
    assert cfg["prior.alpha_m"] == 1.0 and cfg["data.n_train"] + cfg["data.n_test"] == 64


def test_missing_out_is_usage_error():
    assert run("gen", "--n", 4) == 2


def test_unknown_arch_is_usage_error(dataset, tmp_path):
    assert run("train", "--data", dataset, "--arch", "bogus", "--out", tmp_path / "m") == 2


def test_bad_flag_value_is_usage_error(tmp_path):
    assert run("gen", "--n", "many", "--out", tmp_path / "x") == 2
    assert run("gen", "--no-such-flag", "--out", tmp_path / "x") == 2


def test_missing_input_is_usage_error(tmp_path):
    assert run("train", "--data", tmp_path / "absent", "--out", tmp_path / "m") == 2


def test_problem_conflicting_with_dataset_is_usage_error(dataset, tmp_path):
    assert run("train", "--data", dataset, "--problem", "linear_elasticity",
               "--out", tmp_path / "m") == 2


def test_pcanet_full_scale_dims_accepted(tmp_path):
    from operon import config as C
    cfg = C.resolve(C.from_flat({"arch": "pcanet", "net.r_m": "100", "net.r_u": "100"}))
    assert (cfg.net.r_m, cfg.net.r_u) == (100, 100)


def test_resume_matches_uninterrupted(dataset, tmp_path):
    base = ["train", "--data", dataset, "--arch", "pcanet", *SMALL_NET, "--deterministic"]
    assert run(*base, "--epochs", 4, "--out", tmp_path / "full") == 0
    assert run(*base, "--epochs", 2, "--out", tmp_path / "half") == 0
    assert run(*base, "--epochs", 4, "--resume", tmp_path / "half", "--out", tmp_path / "rest") == 0
    assert _bytes(tmp_path / "full" / "loss.csv") == _bytes(tmp_path / "rest" / "loss.csv")
    assert _bytes(tmp_path / "full" / "params.bin") == _bytes(tmp_path / "rest" / "params.bin")


def test_resume_wrong_arch_is_usage_error(dataset, tmp_path):
    assert run("train", "--data", dataset, "--arch", "pcanet", *SMALL_NET, "--epochs", 1,
               "--out", tmp_path / "p") == 0
    assert run("train", "--data", dataset, "--arch", "deeponet", "--resume", tmp_path / "p",
               "--out", tmp_path / "q") == 2


def test_evaluate_perfect_stub_gives_zero_errors(rng):
    Y = rng.standard_normal((7, 30))
    X = rng.standard_normal((7, 30))
    table, summary = cli.evaluate(lambda _: Y.copy(), X, Y, np.arange(7))
    assert [e for _, e in table] == [0.0] * 7
    assert summary["median_rel_l2_percent"] == 0.0


def test_eval_summary_recomputable_from_csv(dataset, tmp_path):
    assert run("train", "--data", dataset, "--arch", "pcanet", *SMALL_NET, "--epochs", 3,
               "--out", tmp_path / "m") == 0
    assert run("eval", "--data", dataset, "--model", tmp_path / "m", "--out", tmp_path / "e") == 0
    with open(tmp_path / "e" / "errors.csv") as fh:
        rows = list(csv.DictReader(fh))
    errs = np.array([float(r["rel_l2_percent"]) for r in rows])
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    ds, _ = read_dataset(dataset)
    assert [int(r["sample_index"]) for r in rows] == list(ds.test_idx)
    assert abs(np.median(errs) - summary["median_rel_l2_percent"]) <= 1e-12
    assert abs(np.mean(errs) - summary["mean_rel_l2_percent"]) <= 1e-12


def test_spectrum_writes_sorted_singular_values(dataset, tmp_path):
    assert run("spectrum", "--data", dataset, "--out", tmp_path / "s") == 0
    for name in ("inputs", "outputs"):
        with open(tmp_path / "s" / f"spectrum_{name}.csv") as fh:
            s = np.array([float(r["sigma"]) for r in csv.DictReader(fh)])
        assert np.all(np.diff(s) <= 0) and s[0] > 0


@pytest.fixture(scope="module")
def truth(tmp_path_factory):
    out = tmp_path_factory.mktemp("truth") / "t"
    assert run("truth", "--nx", 10, "--ny", 10, "--deterministic", "--out", out) == 0
    return out


def test_truth_files(truth):
    meta = json.loads((truth / "meta.json").read_text())
    assert meta["truth_version"] and meta["sigma_o"] > 0
    o = np.fromfile(truth / "obs_data.bin", dtype="<f8")
    assert o.size == 256
    assert meta["sigma_o"] == pytest.approx(0.05 * o.mean(), rel=1e-12)


def test_mcmc_fem_and_surrogate_reports(truth, tmp_path):
    chain = ["--chain-length", 30, "--burn", 10, "--seed", 3]
    assert run("mcmc", "--truth", truth, *chain, "--out", tmp_path / "fem") == 0
    # a tiny surrogate on the same mesh
    assert run("gen", "--nx", 10, "--ny", 10, "--n", 24, "--out", tmp_path / "d") == 0
    assert run("train", "--data", tmp_path / "d", "--arch", "fno", "--n1", 11, "--n2", 11,
               "--kmax", 3, "--dh", 4, "--layers", 1, "--epochs", 1, "--out", tmp_path / "f") == 0
    assert run("mcmc", "--truth", truth, *chain, "--forward", "fno", "--model", tmp_path / "f",
               "--out", tmp_path / "fno") == 0
    for name in ("fem", "fno"):
        rep = json.loads((tmp_path / name / "report.json").read_text())
        assert rep["iterations"] == 30 and rep["forward"] == name
        assert np.isfinite(rep["posterior_mean_m_rel_l2_percent"])
        assert os.path.exists(tmp_path / name / "trace" / "trace.csv")
        assert np.fromfile(tmp_path / name / "posterior_mean_m.bin").size == 121


def test_mcmc_forward_model_mismatch_is_usage_error(truth, dataset, tmp_path):
    # the model is trained on a 20x20 mesh, the truth lives on 10x10
    assert run("train", "--data", dataset, "--arch", "pcanet", *SMALL_NET, "--epochs", 1,
               "--out", tmp_path / "m") == 0
    assert run("mcmc", "--truth", truth, "--forward", "pcanet", "--model", tmp_path / "m",
               "--chain-length", 5, "--burn", 1, "--out", tmp_path / "c") == 2
    assert run("mcmc", "--truth", truth, "--forward", "fno", "--model", tmp_path / "m",
               "--chain-length", 5, "--burn", 1, "--out", tmp_path / "c") == 2


def test_beta_above_one_is_usage_error(truth, tmp_path):
    assert run("mcmc", "--truth", truth, "--beta", 1.5, "--out", tmp_path / "c") == 2


def test_elasticity_beta_setting(tmp_path):
    from operon import config as C
    cfg = C.resolve(C.from_flat({"problem": "linear_elasticity", "mcmc.beta": "0.15"}))
    assert cfg.mcmc.beta == 0.15
    assert C.resolve(C.from_flat({"problem": "linear_elasticity"})).mcmc.beta == 0.15


def test_config_file_overridden_by_flags(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"data.N": 10, "mesh.nx": 4, "mesh.ny": 4, "seed": 1}))
    assert run("gen", "--config", cfg_file, "--n", 6, "--out", tmp_path / "d") == 0
    echo = json.loads((tmp_path / "d" / "config.json").read_text())
    assert echo["data.N"] == 6 and echo["mesh.nx"] == 4 and echo["seed"] == 1


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"data.M": 10}))
    assert run("gen", "--config", cfg_file, "--out", tmp_path / "d") == 2


@pytest.mark.parametrize("command", ["gen", "train", "truth", "mcmc"])
def test_rerun_from_echo_is_bitwise_identical(command, dataset, truth, tmp_path):
    extra = {
        "gen": ["--nx", 6, "--ny", 6, "--n", 10],
        "train": ["--data", dataset, "--arch", "deeponet", "--ntr", 4, "--width", 8, "--depth", 2,
                  "--epochs", 2],
        "truth": ["--nx", 6, "--ny", 6],
        "mcmc": ["--truth", truth, "--chain-length", 20, "--burn", 5],
    }[command]
    first, second = tmp_path / "a", tmp_path / "b"
    assert run(command, *extra, "--deterministic", "--out", first) == 0
    assert run(command, "--config", first / "config.json", "--deterministic", "--out", second) == 0
    compared = 0
    for root, _, files in os.walk(first):
        for f in files:
            if f.endswith(".bin") or f in ("loss.csv", "trace.csv"):
                rel = os.path.relpath(os.path.join(root, f), first)
                assert _bytes(first / rel) == _bytes(second / rel), rel
                compared += 1
    assert compared > 0
