"""Measurement surfaces: estimator-match curves, L1 distance to the oracle,
loss gaps, decay-factor trajectories, and the window/order sweep.

Every function accepts the string sentinel ``"oracle"`` in place of model
parameters, which substitutes the add-beta predictor for the model; the
self-comparison then comes out exactly zero, which doubles as a calibration
check of the metric plumbing. Figure-facing metrics restrict to positions
t >= k, where the oracle's context is defined.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import markov, model, smoothing, training
from .markov import SWITCH_TOKEN, TokenSequence
from .model import MambaConfig, MambaParams

ORACLE = "oracle"


class InfiniteDivergenceError(ValueError):
    """KL is infinite: q vanishes where p has mass."""


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    mass = p > 0.0
    if np.any(q[mass] <= 0.0):
        raise InfiniteDivergenceError("q has a zero where p has mass")
    return float(np.sum(p[mass] * np.log(p[mass] / q[mass])))


def _model_traces(params, cfg: MambaConfig | None, seqs: list[TokenSequence],
                  k: int, beta: float) -> np.ndarray:
    """(B, T, V) predictive traces for the model or the oracle sentinel."""
    if isinstance(params, str):
        if params != ORACLE:
            raise ValueError(f"unknown model sentinel {params!r}")
        return np.stack([smoothing.oracle_trace(s, k, beta) for s in seqs])
    tokens = markov.batch_tokens(seqs)
    return model.batched_trace(params, cfg, tokens)


@dataclass
class MatchCurve:
    """Model vs oracle next-token probabilities on conditioned positions."""

    positions: np.ndarray  # 1-based t with x_t == condition token and t >= k
    model_p1: np.ndarray
    oracle_p1: np.ndarray
    condition_token: int = 0

    def max_abs_gap(self) -> float:
        return float(np.abs(self.model_p1 - self.oracle_p1).max())

    def mean_abs_gap(self) -> float:
        return float(np.abs(self.model_p1 - self.oracle_p1).mean())

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "model_p1", "oracle_p1"])
            for t, mp, op in zip(self.positions, self.model_p1, self.oracle_p1):
                writer.writerow([int(t), repr(float(mp)), repr(float(op))])


def match_curve(params, cfg, seq, k: int, beta: float,
                condition_token: int = 0) -> MatchCurve:
    """P(next = 1) for model and oracle at every t >= k with x_t == condition."""
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq)
    trace = _model_traces(params, cfg, [TokenSequence(tokens)], k, beta)[0]
    oracle = smoothing.oracle_trace(tokens, k, beta)
    t_axis = np.arange(1, len(tokens) + 1)
    keep = (tokens == condition_token) & (t_axis >= k)
    return MatchCurve(positions=t_axis[keep], model_p1=trace[keep, 1],
                      oracle_p1=oracle[keep, 1], condition_token=condition_token)


def l1_distance(params, cfg, seqs: list[TokenSequence], k: int, beta: float) -> float:
    """Mean L1 distance between model and oracle laws over t >= k."""
    traces = _model_traces(params, cfg, seqs, k, beta)
    total, count = 0.0, 0
    for trace, seq in zip(traces, seqs):
        oracle = smoothing.oracle_trace(seq, k, beta)
        l1 = np.abs(trace - oracle).sum(axis=1)[k - 1:]
        total += float(l1.sum())
        count += l1.size
    return total / count


def loss_gap(params, cfg, seqs: list[TokenSequence], k: int, beta: float,
             p_switch: float | None = None) -> float:
    """|model cross-entropy - oracle cross-entropy| over positions [k, T-1]."""
    if p_switch is None:
        oracle = smoothing.oracle_loss(seqs, k, beta)
    else:
        oracle = smoothing.switching_oracle_loss(seqs, k, beta, p_switch)
    if isinstance(params, str):
        if params != ORACLE:
            raise ValueError(f"unknown model sentinel {params!r}")
        if p_switch is None:
            traces = [smoothing.oracle_trace(s, k, beta) for s in seqs]
        else:
            traces = [smoothing.switching_trace(s, k, beta, p_switch) for s in seqs]
        losses = [smoothing.mean_nll(tr, s.tokens, k) for tr, s in zip(traces, seqs)]
        model_loss = float(np.mean(losses))
    else:
        model_loss = training.eval_nll(params, cfg, markov.batch_tokens(seqs), k)
    return abs(model_loss - oracle)


@dataclass
class DecayTrajectory:
    """Per-position state decay factors, with switch positions marked."""

    a: np.ndarray  # (T,)
    switch_positions: np.ndarray  # 1-based positions where x_t == S

    def write_csv(self, path) -> None:
        switches = set(self.switch_positions.tolist())
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "a", "is_switch"])
            for t, val in enumerate(self.a, start=1):
                writer.writerow([t, repr(float(val)), int(t in switches)])


def at_trajectory(params: MambaParams, cfg: MambaConfig, seq) -> DecayTrajectory:
    """The decay factor a_t across a sequence (switch tokens annotated)."""
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq)
    out = model.forward_batched(params.as_dict(), cfg, tokens[None, :])
    a = np.asarray(out.a).ravel()
    switches = np.flatnonzero(tokens == SWITCH_TOKEN) + 1
    return DecayTrajectory(a=a, switch_positions=switches)


@dataclass
class SweepResult:
    """Grid of (order, window, seed) training outcomes."""

    cells: list[dict] = field(default_factory=list)
    pass_threshold: float = 0.05

    def cell(self, k: int, w: int, seed: int) -> dict | None:
        for c in self.cells:
            if (c["k"], c["w"], c["seed"]) == (k, w, seed):
                return c
        return None

    def to_dict(self) -> dict:
        return {"pass_threshold": self.pass_threshold, "cells": self.cells}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def window_order_sweep(orders, windows, base: training.TrainConfig,
                       seeds=(0,), pass_threshold: float = 0.05,
                       eval_sequences: int = 256, progress=None,
                       trained=None) -> SweepResult:
    """Train one model per (order, window, seed) cell and record its loss gap.

    A failed cell is recorded (status "failed") and the sweep continues.
    `trained` optionally maps (k, w, seed) to a pre-trained TrainResult,
    letting callers reuse runs; everything else is trained here.
    """
    result = SweepResult(pass_threshold=pass_threshold)
    for k in orders:
        for w in windows:
            for seed in seeds:
                cell = {"k": int(k), "w": int(w), "seed": int(seed)}
                try:
                    res = (trained or {}).get((k, w, seed))
                    if res is None:
                        res = training.train(sweep_cell_config(base, k, w, seed))
                    eval_seqs = markov.sample_batch(
                        k, base.beta, base.T, eval_sequences,
                        training.stream_rng(seed, 3))
                    gap = loss_gap(res.params, res.config.model, eval_seqs,
                                   k, base.beta)
                    cell.update(gap=gap, passed=bool(gap <= pass_threshold),
                                status="ok", metrics=res.metrics)
                except Exception as err:  # noqa: BLE001 - cell isolation
                    cell.update(gap=None, passed=False, status="failed",
                                error=str(err))
                result.cells.append(cell)
                if progress is not None:
                    progress(cell)
    return result


def sweep_cell_config(base: training.TrainConfig, k: int, w: int,
                      seed: int) -> training.TrainConfig:
    """The training config for one sweep cell: order k, window w."""
    mcfg = replace(base.model, w=w, w_c=None)
    return replace(base, model=mcfg, k=k, seed=seed)
