"""Next-token cross-entropy training with AdamW and a cosine schedule.

Every iteration draws a fresh batch (new kernels, new sequences), so the
model never sees the same chain twice and must estimate transition statistics
in-context. Training is deterministic under the config seed: data for
iteration i comes from an independent stream keyed by (seed, i), which also
makes resumed runs bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import markov, model, smoothing
from .model import MambaConfig, MambaParams
from .smoothing import InfiniteLossError

_INIT_STREAM, _DATA_STREAM, _EVAL_STREAM = 0, 1, 2


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    """Model, data, optimizer and schedule settings.

    Optimizer defaults follow the usual AdamW recipe for this task family:
    lr 1e-3 with cosine decay to zero over 10000 iterations, betas (0.9,
    0.95), weight decay 1e-3. Loss is averaged over positions t >= k only;
    earlier predictions target uniform noise and add a constant.
    """

    model: MambaConfig = field(default_factory=MambaConfig)
    k: int = 1
    beta: float = 1.0
    T: int = 256
    B: int = 64
    p_switch: float | None = None  # switching data when set
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    total_iters: int = 10000
    lr_min: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 500
    eval_batch: int = 64
    loss_start: int | None = None  # defaults to k

    def __post_init__(self):
        if min(self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps) <= 0:
            raise ValueError("optimizer rates must be positive")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.k < 1 or self.beta <= 0 or self.T < self.k + 1 or self.B < 1:
            raise ValueError("invalid data settings")
        if self.loss_start is None:
            self.loss_start = self.k
        if not 1 <= self.loss_start <= self.T - 1:
            raise ValueError(f"loss_start={self.loss_start} out of range")
        switching = self.p_switch is not None
        if switching != (self.model.alphabet_size == 3):
            raise ValueError("p_switch requires alphabet_size=3 and vice versa")


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Independent generator for a (seed, stream, index) triple."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def cross_entropy_loss(trace: model.PredictionTrace, seq, start: int) -> float:
    """Mean NLL of realized next tokens over positions t in [start, T-1]."""
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq)
    return smoothing.mean_nll(trace.probs, tokens, start)


def cosine_lr(iteration: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * iteration / total)) / 2."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * iteration / total)) / 2.0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    """Scale gradients so their global norm is at most max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not max_norm or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               cfg: TrainConfig):
    """Decoupled weight decay, then Adam with bias correction."""
    t = state.step + 1
    c1 = 1.0 - cfg.adam_beta1**t
    c2 = 1.0 - cfg.adam_beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = cfg.adam_beta1 * state.m[name] + (1.0 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * state.v[name] + (1.0 - cfg.adam_beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_p[name] = w * (1.0 - lr * cfg.weight_decay) - step
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(m=new_m, v=new_v, step=t)


def batched_loss(probs, tokens: np.ndarray, start: int):
    """Training objective on blocked batched probabilities (tape-friendly).

    Flat mean of -log p(x_{t+1}) over positions t in [start, T-1] and all
    batch elements.
    """
    B, T = tokens.shape
    picked = ad.pick_per_column(ad.cols(probs, (start - 1) * B, (T - 1) * B),
                                tokens[:, start:].T.reshape(-1))
    vals = picked.value if isinstance(picked, ad.Tensor) else picked
    if np.any(vals <= 0.0):
        col = int(np.flatnonzero(vals[0] <= 0.0)[0])
        raise InfiniteLossError(start + col // B + 1)
    count = (T - start) * B
    return ad.mul(ad.total(ad.log(picked)), -1.0 / count)


def eval_nll(params: MambaParams, mcfg: MambaConfig, tokens: np.ndarray,
             start: int) -> float:
    """Held-out loss: per-sequence mean NLL, then mean over sequences.

    Matches the oracle-loss summation order exactly, so swapping the oracle in
    for the model gives a gap of exactly zero.
    """
    traces = model.batched_trace(params, mcfg, tokens)
    losses = [smoothing.mean_nll(traces[b], tokens[b], start)
              for b in range(tokens.shape[0])]
    return float(np.mean(losses))


@dataclass
class TrainResult:
    params: MambaParams
    metrics: list[dict]
    oracle_eval_loss: float
    config: TrainConfig
    opt_state: OptimizerState | None = None


def _sample_train_batch(cfg: TrainConfig, rng) -> np.ndarray:
    if cfg.p_switch is None:
        seqs = markov.sample_batch(cfg.k, cfg.beta, cfg.T, cfg.B, rng)
    else:
        swcfg = markov.SwitchingConfig(k=cfg.k, beta=cfg.beta,
                                       p_switch=cfg.p_switch, T=cfg.T)
        seqs = markov.sample_switching_batch(swcfg, cfg.B, rng)
    return markov.batch_tokens(seqs)


def held_out_batch(cfg: TrainConfig) -> list[markov.TokenSequence]:
    """The fixed evaluation batch for a config (independent of iteration)."""
    rng = stream_rng(cfg.seed, _EVAL_STREAM)
    if cfg.p_switch is None:
        return markov.sample_batch(cfg.k, cfg.beta, cfg.T, cfg.eval_batch, rng)
    swcfg = markov.SwitchingConfig(k=cfg.k, beta=cfg.beta,
                                   p_switch=cfg.p_switch, T=cfg.T)
    return markov.sample_switching_batch(swcfg, cfg.eval_batch, rng)


def train(cfg: TrainConfig, resume: tuple[MambaParams, dict] | None = None,
          progress=None, stop_after: int | None = None) -> TrainResult:
    """Run (or continue) a training job; returns final params and metric rows.

    `resume` takes (params, train_state) from a checkpoint written by a
    previous run with the same config; the continued run produces metrics
    identical to an uninterrupted one. `stop_after` interrupts after that
    many iterations (the schedule still spans cfg.total_iters). `progress`
    is an optional callable receiving each metrics row.
    """
    mcfg = cfg.model
    if resume is None:
        params = model.init_params(mcfg, stream_rng(cfg.seed, _INIT_STREAM))
        opt = OptimizerState.zeros(params.as_dict())
        start_iter = 0
    else:
        params, state = resume
        params.validate(mcfg)
        shapes = {k: v.shape for k, v in params.as_dict().items()}
        opt = OptimizerState(
            m={k: np.asarray(v, dtype=np.float64).reshape(shapes[k])
               for k, v in state["m"].items()},
            v={k: np.asarray(v, dtype=np.float64).reshape(shapes[k])
               for k, v in state["v"].items()},
            step=state["iteration"])
        start_iter = state["iteration"]

    eval_tokens = markov.batch_tokens(held_out_batch(cfg))
    if cfg.p_switch is None:
        oracle_eval = smoothing.oracle_loss(held_out_batch(cfg), cfg.k, cfg.beta)
    else:
        oracle_eval = smoothing.switching_oracle_loss(held_out_batch(cfg), cfg.k,
                                                      cfg.beta, cfg.p_switch)

    rows: list[dict] = []

    def emit(iteration, lr, train_loss):
        eval_loss = eval_nll(params, mcfg, eval_tokens, cfg.loss_start)
        row = {"iter": iteration, "lr": lr, "train_loss": train_loss,
               "eval_loss": eval_loss, "loss_gap": abs(eval_loss - oracle_eval)}
        rows.append(row)
        if progress is not None:
            progress(row)

    if start_iter == 0:
        emit(0, cosine_lr(0, cfg.total_iters, cfg.lr, cfg.lr_min), float("nan"))

    stop_iter = cfg.total_iters
    if stop_after is not None:
        stop_iter = min(stop_iter, start_iter + stop_after)

    for it in range(start_iter + 1, stop_iter + 1):
        tokens = _sample_train_batch(cfg, stream_rng(cfg.seed, _DATA_STREAM, it))
        tape = ad.Tape()
        bound = {k: tape.input(k, v) for k, v in params.as_dict().items()}
        fwd = model.forward_batched(bound, mcfg, tokens, head_strict=False)
        loss_node = batched_loss(fwd.probs, tokens, cfg.loss_start)
        loss = float(loss_node.value)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}")
        grads, _ = clip_grad_norm(tape.gradients(loss_node), cfg.grad_clip)
        lr = cosine_lr(it - 1, cfg.total_iters, cfg.lr, cfg.lr_min)
        pdict, opt = adamw_step(params.as_dict(), grads, opt, lr, cfg)
        pdict["a"] = np.maximum(pdict["a"], 0.0)  # keep the decay rate admissible
        params = MambaParams.from_dict(pdict)
        if it % cfg.eval_every == 0 or it == stop_iter:
            emit(it, lr, loss)

    return TrainResult(params=params, metrics=rows,
                       oracle_eval_loss=oracle_eval, config=cfg, opt_state=opt)


def train_state_dict(opt: OptimizerState) -> dict:
    """Optimizer state in checkpoint-JSON form."""
    return {"iteration": opt.step,
            "m": {k: v.ravel().tolist() for k, v in opt.m.items()},
            "v": {k: v.ravel().tolist() for k, v in opt.v.items()}}


METRIC_FIELDS = ["iter", "lr", "train_loss", "eval_loss", "loss_gap"]


def write_metrics(path, rows: list[dict], append: bool = False) -> None:
    """Metrics CSV: iter, lr, train_loss, eval_loss, loss_gap."""
    mode = "a" if append else "w"
    with Path(path).open(mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if not append:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(row[k])) if k != "iter" else row[k]
                             for k in METRIC_FIELDS})
