"""Command-line interface: gen-data, train, eval, verify-construction, sweep.

Configuration comes from JSON files with sections model / data / train /
eval / output, every field defaulting to the standard experiment settings;
command-line flags override file values. The resolved configuration is
echoed into the output directory so any run can be reproduced from its
artifacts alone. Exit codes: 0 success, 1 certification or acceptance
failure, 2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import construction, markov, metrics, model, smoothing, training

OUT_ROOT_ENV = "MAMBALAB_OUT"
EVAL_SEED_DEFAULT = 1234  # the pinned held-out evaluation stream


class ConfigError(ValueError):
    """Bad configuration file or flag combination."""


_MODEL_KEYS = {f.name for f in dataclasses.fields(model.MambaConfig)}
_DATA_KEYS = {"k", "beta", "T", "B", "p_switch"}
_TRAIN_KEYS = {"lr", "adam_beta1", "adam_beta2", "adam_eps", "weight_decay",
               "total_iters", "lr_min", "grad_clip", "seed", "eval_every",
               "eval_batch", "loss_start"}
_EVAL_KEYS = {"sequences", "seed", "condition_token"}
_OUTPUT_KEYS = {"dir", "run_id"}
_SECTIONS = {"model": _MODEL_KEYS, "data": _DATA_KEYS, "train": _TRAIN_KEYS,
             "eval": _EVAL_KEYS, "output": _OUTPUT_KEYS}


def load_config(path) -> dict:
    """Parse a JSON experiment config, rejecting unknown sections or keys."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for section, body in doc.items():
        allowed = _SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"unknown config section {section!r}")
        for key in body:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")
    return doc


def _resolve(args, flag_overrides: dict) -> dict:
    """defaults <- config file <- CLI flags, as plain section dicts."""
    sections = {name: {} for name in _SECTIONS}
    if getattr(args, "config", None):
        for name, body in load_config(args.config).items():
            sections[name].update(body)
    for (section, key), value in flag_overrides.items():
        if value is not None:
            sections[section][key] = value
    return sections


def build_train_config(sections: dict) -> training.TrainConfig:
    try:
        mcfg = model.MambaConfig(**sections["model"])
        return training.TrainConfig(model=mcfg, **sections["data"],
                                    **sections["train"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def resolved_config_doc(cfg: training.TrainConfig, eval_section=None,
                        output_section=None) -> dict:
    doc = {
        "model": dataclasses.asdict(cfg.model),
        "data": {"k": cfg.k, "beta": cfg.beta, "T": cfg.T, "B": cfg.B,
                 "p_switch": cfg.p_switch},
        "train": {key: getattr(cfg, key) for key in sorted(_TRAIN_KEYS)},
    }
    if eval_section is not None:
        doc["eval"] = eval_section
    if output_section is not None:
        doc["output"] = output_section
    return doc


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "out"))


def run_dir(args, sections, kind: str, doc: dict) -> Path:
    base = Path(sections["output"].get("dir") or out_root())
    run_id = sections["output"].get("run_id")
    if not run_id:
        digest = hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()).hexdigest()[:10]
        run_id = f"{kind}-{digest}"
    path = base / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(path: Path, doc: dict) -> None:
    (path / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    sections = _resolve(args, {
        ("data", "k"): args.k, ("data", "beta"): args.beta,
        ("data", "T"): args.T, ("data", "B"): args.B,
        ("data", "p_switch"): args.p_switch,
        ("train", "seed"): args.seed,
        ("output", "dir"): args.out, ("output", "run_id"): args.run_id,
    })
    data = {"k": 1, "beta": 1.0, "T": 256, "B": 64, "p_switch": None}
    data.update(sections["data"])
    seed = sections["train"].get("seed", 0)
    doc = {"data": data, "seed": seed}
    out = run_dir(args, sections, "gen-data", doc)

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    if data["p_switch"] is None:
        seqs = markov.sample_batch(data["k"], data["beta"], data["T"],
                                   data["B"], rng)
        alphabet = "binary"
    else:
        swcfg = markov.SwitchingConfig(k=data["k"], beta=data["beta"],
                                       p_switch=data["p_switch"], T=data["T"])
        seqs = markov.sample_switching_batch(swcfg, data["B"], rng)
        alphabet = "switching"
    markov.write_sequences(out / "sequences.txt", seqs)
    manifest = {"alphabet": alphabet, "file": "sequences.txt", **doc}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True))
    print(f"wrote {data['B']} sequences to {out}")
    return 0


# ---------------------------------------------------------------------------
# train

_ABLATIONS = {"no-conv": "use_conv", "no-relu": "use_relu",
              "no-gating": "use_gating"}


def cmd_train(args) -> int:
    overrides = {
        ("model", "d"): args.d, ("model", "n_state"): args.n_state,
        ("model", "e"): args.e, ("model", "w"): args.w,
        ("model", "w_c"): args.w_c, ("model", "variant"): args.variant,
        ("model", "prediction_head"): args.head,
        ("model", "alphabet_size"): 3 if args.p_switch is not None else None,
        ("data", "k"): args.k, ("data", "beta"): args.beta,
        ("data", "T"): args.T, ("data", "B"): args.B,
        ("data", "p_switch"): args.p_switch,
        ("train", "seed"): args.seed, ("train", "total_iters"): args.iters,
        ("train", "eval_every"): args.eval_every,
        ("output", "dir"): args.out, ("output", "run_id"): args.run_id,
    }
    sections = _resolve(args, overrides)
    for name in args.ablate or []:
        if name not in _ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; "
                              f"choose from {sorted(_ABLATIONS)}")
        sections["model"][_ABLATIONS[name]] = False
    cfg = build_train_config(sections)
    doc = resolved_config_doc(cfg, output_section=sections["output"])
    out = run_dir(args, sections, "train", doc)
    _echo_config(out, doc)

    resume = None
    if args.resume:
        ck_cfg, params, state = model.load_checkpoint(args.resume)
        if ck_cfg != cfg.model:
            raise ConfigError("checkpoint model config does not match run config")
        if state is None:
            raise ConfigError("checkpoint has no training state to resume from")
        resume = (params, state)

    def log_row(row):
        if not args.quiet:
            print(f"iter {row['iter']:>6}  train {row['train_loss']:.4f}  "
                  f"eval {row['eval_loss']:.4f}  gap {row['loss_gap']:.4f}",
                  flush=True)

    result = training.train(cfg, resume=resume, stop_after=args.stop_after,
                            progress=log_row)
    training.write_metrics(out / "metrics.csv", result.metrics,
                           append=args.resume is not None)
    model.save_checkpoint(out / "checkpoint.json", cfg.model, result.params,
                          train_state=training.train_state_dict(result.opt_state))
    print(f"final loss gap {result.metrics[-1]['loss_gap']:.5f}; "
          f"artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    if args.checkpoint != metrics.ORACLE and not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint {args.checkpoint!r} not found")
    sections = _resolve(args, {
        ("data", "k"): args.k, ("data", "beta"): args.beta,
        ("data", "T"): args.T, ("data", "p_switch"): args.p_switch,
        ("eval", "sequences"): args.sequences, ("eval", "seed"): args.seed,
        ("eval", "condition_token"): None,
        ("output", "dir"): args.out, ("output", "run_id"): args.run_id,
    })
    data = {"k": 1, "beta": 1.0, "T": 256, "p_switch": None}
    data.update({k: v for k, v in sections["data"].items() if k != "B"})
    ev = {"sequences": 256, "seed": EVAL_SEED_DEFAULT, "condition_token": 0}
    ev.update(sections["eval"])

    if args.checkpoint == metrics.ORACLE:
        params, mcfg = metrics.ORACLE, None
    else:
        mcfg, params, _ = model.load_checkpoint(args.checkpoint)
        if data["p_switch"] is not None and mcfg.alphabet_size != 3:
            raise ConfigError("switching eval needs an alphabet-3 checkpoint")

    doc = {"data": data, "eval": ev, "checkpoint": str(args.checkpoint)}
    out = run_dir(args, sections, "eval", doc)
    _echo_config(out, doc)

    rng = np.random.default_rng(np.random.SeedSequence([ev["seed"]]))
    k, beta, T = data["k"], data["beta"], data["T"]
    if data["p_switch"] is None:
        seqs = markov.sample_batch(k, beta, T, ev["sequences"], rng)
        test_seq = seqs[0]
        summary = {
            "loss_gap": metrics.loss_gap(params, mcfg, seqs, k, beta),
            "l1_distance": metrics.l1_distance(params, mcfg, seqs, k, beta),
            "oracle_loss": smoothing.oracle_loss(seqs, k, beta),
        }
        for cond in (0, 1):
            curve = metrics.match_curve(params, mcfg, test_seq, k, beta,
                                        condition_token=cond)
            curve.write_csv(out / f"match_curve_x{cond}.csv")
            summary[f"match_mean_abs_gap_x{cond}"] = curve.mean_abs_gap()
    else:
        swcfg = markov.SwitchingConfig(k=k, beta=beta,
                                       p_switch=data["p_switch"], T=T)
        seqs = markov.sample_switching_batch(swcfg, ev["sequences"], rng)
        test_seq = seqs[0]
        summary = {
            "loss_gap": metrics.loss_gap(params, mcfg, seqs, k, beta,
                                         p_switch=data["p_switch"]),
            "oracle_loss": smoothing.switching_oracle_loss(
                seqs, k, beta, data["p_switch"]),
        }
    if not isinstance(params, str):
        traj = metrics.at_trajectory(params, mcfg, test_seq)
        traj.write_csv(out / "at_trajectory.csv")
        if data["p_switch"] is not None:
            s_mask = test_seq.tokens == markov.SWITCH_TOKEN
            summary["mean_a_at_switch"] = float(traj.a[s_mask].mean())
            summary["mean_a_elsewhere"] = float(traj.a[~s_mask].mean())
    (out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                 sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# verify-construction

def cmd_verify_construction(args) -> int:
    if not 0.0 < args.epsilon < 1.0:
        raise ConfigError(f"epsilon must be in (0, 1), got {args.epsilon}")
    if args.beta <= 0:
        raise ConfigError(f"beta must be > 0, got {args.beta}")
    cfg, params = construction.build_exact_params(
        args.beta, args.epsilon, perturb_alpha0=args.perturb)
    cert = construction.verify_construction(params, args.beta, args.epsilon,
                                            args.tmax)
    doc = cert.to_dict()
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        model.save_checkpoint(path.parent / "checkpoint.json", cfg, params)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0 if cert.certified else 1


# ---------------------------------------------------------------------------
# sweep

def _sweep_cell(payload):
    base, k, w, seed, eval_sequences = payload
    result = metrics.window_order_sweep([k], [w], base, seeds=(seed,),
                                        eval_sequences=eval_sequences)
    return result.cells[0]


def cmd_sweep(args) -> int:
    sections = _resolve(args, {
        ("data", "beta"): args.beta, ("data", "T"): args.T,
        ("data", "B"): args.B, ("train", "total_iters"): args.iters,
        ("train", "eval_every"): args.eval_every,
        ("output", "dir"): args.out, ("output", "run_id"): args.run_id,
    })
    sections["data"].pop("k", None)
    base = build_train_config(sections)
    orders = [int(x) for x in args.orders.split(",")]
    windows = [int(x) for x in args.windows.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    doc = resolved_config_doc(base)
    doc["sweep"] = {"orders": orders, "windows": windows, "seeds": seeds,
                    "pass_threshold": args.pass_threshold}
    out = run_dir(args, sections, "sweep", doc)
    _echo_config(out, doc)

    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    result = metrics.SweepResult(pass_threshold=args.pass_threshold)
    pending = []
    for k in orders:
        for w in windows:
            for seed in seeds:
                cell_dir = cells_dir / f"k{k}-w{w}-seed{seed}"
                done = cell_dir / "result.json"
                if done.exists():  # per-cell resume
                    result.cells.append(json.loads(done.read_text()))
                else:
                    pending.append((k, w, seed, cell_dir))

    def finish(cell, cell_dir):
        cell_dir.mkdir(exist_ok=True)
        rows = cell.pop("metrics", None)
        if rows:
            training.write_metrics(cell_dir / "metrics.csv", rows)
        if cell["passed"] is not None:
            cell["passed"] = bool(cell["passed"])
        (cell_dir / "result.json").write_text(json.dumps(cell, sort_keys=True))
        result.cells.append(cell)
        status = "pass" if cell["passed"] else cell["status"]
        gap = "-" if cell["gap"] is None else f"{cell['gap']:.4f}"
        print(f"cell k={cell['k']} w={cell['w']} seed={cell['seed']}: "
              f"gap {gap} [{status}]", flush=True)

    if args.jobs > 1 and pending:
        payloads = [(base, k, w, s, args.eval_sequences) for k, w, s, _ in pending]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for (k, w, s, cell_dir), cell in zip(pending,
                                                 pool.map(_sweep_cell, payloads)):
                finish(cell, cell_dir)
    else:
        for k, w, s, cell_dir in pending:
            cell = _sweep_cell((base, k, w, s, args.eval_sequences))
            finish(cell, cell_dir)

    result.cells.sort(key=lambda c: (c["k"], c["w"], c["seed"]))
    result.write_json(out / "sweep.json")
    print(f"sweep results in {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mambalab",
        description="Train, evaluate, and certify selective SSMs on random "
                    "Markov chains.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output root (default $MAMBALAB_OUT or ./out)")
        p.add_argument("--run-id", help="output subdirectory name")

    p = sub.add_parser("gen-data", help="generate Markov sequence files")
    add_common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--p-switch", type=float, dest="p_switch")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    add_common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--p-switch", type=float, dest="p_switch")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--d", type=int)
    p.add_argument("--n-state", type=int, dest="n_state")
    p.add_argument("--e", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--w-c", type=int, dest="w_c")
    p.add_argument("--variant", choices=["full", "minimal"])
    p.add_argument("--head", choices=["softmax", "l1norm"])
    p.add_argument("--ablate", action="append",
                   help="drop a mechanism: no-conv, no-relu, no-gating")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, dest="stop_after",
                   help="stop after N iterations (for interruption tests)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the oracle")
    add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'oracle' for the oracle itself")
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--p-switch", type=float, dest="p_switch")
    p.add_argument("--sequences", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify-construction",
                       help="certify the exact-parameter KL bound exhaustively")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--tmax", type=int, default=16)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="perturb alpha0 by this fraction (diagnostic)")
    p.add_argument("--out", help="certificate JSON path")
    p.set_defaults(fn=cmd_verify_construction)

    p = sub.add_parser("sweep", help="train a grid over Markov order and window")
    add_common(p)
    p.add_argument("--orders", default="1,2")
    p.add_argument("--windows", default="2,3")
    p.add_argument("--seeds", default="0")
    p.add_argument("--beta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--eval-sequences", type=int, default=256,
                   dest="eval_sequences")
    p.add_argument("--pass-threshold", type=float, default=0.05,
                   dest="pass_threshold")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (smoothing.InfiniteLossError, training.TrainingError) as err:
        print(f"run aborted: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
