"""Command-line surface: files, exit codes, determinism, resume."""

import json
from pathlib import Path

import numpy as np
import pytest

from mambalab import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def train_args(out, **kw):
    base = dict(k=1, T=16, B=4, d=4, iters=4, seed=0)
    base.update(kw)
    argv = ["train", "--out", out, "--quiet", "--eval-every", "2",
            "--n-state", "4"]
    for key, val in base.items():
        argv += [f"--{key.replace('_', '-')}", val]
    return argv


# -- gen-data -----------------------------------------------------------------

def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("gen-data", "--out", out, "--run-id", "r", "--k", 1,
                   "--T", 16, "--B", 2, "--seed", 7) == 0
    text = (a / "r" / "sequences.txt").read_text()
    lines = text.strip().splitlines()
    assert len(lines) == 2 and all(len(l) == 16 for l in lines)
    assert set("".join(lines)) <= {"0", "1"}
    assert text == (b / "r" / "sequences.txt").read_text()


def test_gen_data_switching_degenerate(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--run-id", "s", "--T", 8,
               "--B", 3, "--p-switch", 1.0, "--seed", 1) == 0
    lines = (tmp_path / "s" / "sequences.txt").read_text().strip().splitlines()
    assert all(line == "S" * 8 for line in lines)


def test_gen_data_manifest_reproduces_files(tmp_path):
    first = tmp_path / "one"
    assert run("gen-data", "--out", first, "--run-id", "r", "--k", 2,
               "--T", 32, "--B", 4, "--seed", 99) == 0
    manifest = json.loads((first / "r" / "manifest.json").read_text())
    second = tmp_path / "two"
    assert run("gen-data", "--out", second, "--run-id", "r",
               "--k", manifest["data"]["k"], "--T", manifest["data"]["T"],
               "--B", manifest["data"]["B"], "--seed", manifest["seed"],
               "--beta", manifest["data"]["beta"]) == 0
    assert ((first / "r" / "sequences.txt").read_bytes()
            == (second / "r" / "sequences.txt").read_bytes())


# -- train ---------------------------------------------------------------------

def test_train_writes_artifacts_and_resolved_config(tmp_path):
    assert run(*train_args(tmp_path), "--run-id", "t", "--ablate", "no-conv") == 0
    out = tmp_path / "t"
    config = json.loads((out / "config.json").read_text())
    assert config["model"]["use_conv"] is False  # ablation echoed
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint.json").exists()
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "iter,lr,train_loss,eval_loss,loss_gap"


def test_train_resume_matches_uninterrupted(tmp_path):
    full = tmp_path / "full"
    assert run(*train_args(full), "--run-id", "r", "--iters", 6) == 0
    part = tmp_path / "part"
    assert run(*train_args(part), "--run-id", "r", "--iters", 6,
               "--stop-after", 3) == 0
    assert run(*train_args(part), "--run-id", "r", "--iters", 6,
               "--resume", part / "r" / "checkpoint.json") == 0
    def rows_after(path, cut):
        lines = path.read_text().strip().splitlines()[1:]
        return [l for l in lines if int(l.split(",")[0]) > cut]

    # identical subsequent metrics to the uninterrupted run
    assert rows_after(part / "r" / "metrics.csv", 3) == \
        rows_after(full / "r" / "metrics.csv", 3)


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"layers": 2}}))
    assert run(*train_args(tmp_path), "--config", bad) == 2


# -- eval ------------------------------------------------------------------------

def test_eval_oracle_sentinel_zero_gap(tmp_path):
    assert run("eval", "--checkpoint", "oracle", "--out", tmp_path,
               "--run-id", "e", "--T", 64, "--sequences", 8) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["loss_gap"] == 0.0
    assert summary["l1_distance"] == 0.0
    assert (tmp_path / "e" / "match_curve_x0.csv").exists()
    assert (tmp_path / "e" / "match_curve_x1.csv").exists()


def test_eval_exact_construction_checkpoint(tmp_path):
    cert_path = tmp_path / "v" / "certificate.json"
    assert run("verify-construction", "--beta", 1.0, "--epsilon", 0.01,
               "--tmax", 6, "--out", cert_path) == 0
    assert run("eval", "--checkpoint", tmp_path / "v" / "checkpoint.json",
               "--out", tmp_path, "--run-id", "e", "--T", 64,
               "--sequences", 16) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["loss_gap"] <= 0.01
    assert (tmp_path / "e" / "at_trajectory.csv").exists()


def test_eval_missing_checkpoint_exits_2(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "nope.json",
               "--out", tmp_path) == 2


# -- verify-construction -----------------------------------------------------------

def test_verify_construction_certifies(tmp_path):
    out = tmp_path / "certificate.json"
    assert run("verify-construction", "--beta", 1.0, "--epsilon", 0.01,
               "--tmax", 8, "--out", out) == 0
    cert = json.loads(out.read_text())
    assert cert["certified"] is True
    assert cert["max_kl"] <= 0.01
    assert cert["max_kl_mismatched"] <= 1e-12
    assert cert["positions_checked"] == 2**9 - 2


def test_verify_construction_epsilon_validation():
    assert run("verify-construction", "--beta", 1.0, "--epsilon", 1.5,
               "--tmax", 4) == 2


def test_verify_construction_perturbed_fails(tmp_path):
    out = tmp_path / "certificate.json"
    assert run("verify-construction", "--beta", 1.0, "--epsilon", 0.01,
               "--tmax", 8, "--perturb", 0.1, "--out", out) == 1
    cert = json.loads(out.read_text())
    assert cert["certified"] is False
    assert cert["witness_sequence"]


# -- sweep ----------------------------------------------------------------------------

def sweep_args(out, **extra):
    argv = ["sweep", "--out", out, "--orders", "1", "--windows", "2",
            "--seeds", "0", "--T", 16, "--B", 4, "--iters", 3,
            "--eval-every", 3, "--eval-sequences", 4]
    for key, val in extra.items():
        argv += [f"--{key.replace('_', '-')}", val]
    return [str(a) for a in argv]


def test_sweep_single_cell_matches_library_path(tmp_path):
    from mambalab import metrics, model, training

    assert run(*sweep_args(tmp_path), "--run-id", "s") == 0
    doc = json.loads((tmp_path / "s" / "sweep.json").read_text())
    clean = {k: v for k, v in doc["cells"][0].items() if k != "metrics"}
    base = training.TrainConfig(model=model.MambaConfig(d=8, n_state=8),
                                T=16, B=4, total_iters=3, eval_every=3, seed=0)
    lib = metrics.window_order_sweep([1], [2], base, seeds=(0,),
                                     eval_sequences=4)
    assert clean["gap"] == lib.cells[0]["gap"]
    assert (tmp_path / "s" / "cells" / "k1-w2-seed0" / "metrics.csv").exists()


def test_sweep_resumes_per_cell(tmp_path):
    assert run(*sweep_args(tmp_path), "--run-id", "s") == 0
    cell = tmp_path / "s" / "cells" / "k1-w2-seed0" / "result.json"
    before = json.loads(cell.read_text())
    marker = dict(before, gap=123.0)  # prove the second run reuses the file
    cell.write_text(json.dumps(marker))
    (tmp_path / "s" / "sweep.json").unlink()
    assert run(*sweep_args(tmp_path), "--run-id", "s") == 0
    doc = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert doc["cells"][0]["gap"] == 123.0
