"""Add-beta smoothing: the Bayes-optimal in-context predictor for random
Markov chains drawn from a Dirichlet prior.

Positions follow the 1-based convention of the underlying math: a prediction
"at t" is the distribution of token t+1 given the first t tokens. For t < k
(context not yet formed) the predictor returns the uniform distribution,
which is exact because the first k tokens are uniform by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .markov import SWITCH_TOKEN, TokenSequence


class InfiniteLossError(ValueError):
    """A realized token received zero predicted probability."""

    def __init__(self, position: int):
        super().__init__(f"zero predicted probability for the token realized at position {position}")
        self.position = position


@dataclass
class ContextCounts:
    """Occurrences of the current length-k context inside a prefix."""

    n: int
    n1: int

    @property
    def n0(self) -> int:
        return self.n - self.n1


@dataclass
class TransitionCounts:
    """Order-1 transition tallies n_ij over consecutive pairs."""

    n00: int = 0
    n01: int = 0
    n10: int = 0
    n11: int = 0


def _tokens(seq) -> np.ndarray:
    return seq.tokens if isinstance(seq, TokenSequence) else np.asarray(seq, dtype=np.int64)


def _window_codes(x: np.ndarray, k: int) -> np.ndarray:
    powers = 1 << np.arange(k - 1, -1, -1)
    return np.lib.stride_tricks.sliding_window_view(x, k) @ powers


def count_context(seq, t: int, k: int) -> ContextCounts:
    """Count completed occurrences of the context x_{t-k+1}^t within x_1^t.

    An occurrence at position i (k < i <= t) means the k tokens before x_i
    equal the current context; n1 counts those followed by token 1.
    """
    x = _tokens(seq)
    if t < k:
        raise ValueError(f"t={t} < k={k}: context not formed yet")
    if t > len(x):
        raise ValueError(f"t={t} beyond sequence length {len(x)}")
    codes = _window_codes(x[:t], k)  # codes[j] encodes x_{j+1}^{j+k}
    current = codes[t - k]
    prior = codes[: t - k]  # prefixes fully inside x_1^t whose follower exists
    hit = prior == current
    n = int(hit.sum())
    n1 = int((x[k:t][hit] == 1).sum())
    return ContextCounts(n=n, n1=n1)


def add_beta_predict(seq, t: int, k: int, beta: float) -> np.ndarray:
    """Laplacian add-beta estimate of the next-token law: (n_j + beta)/(n + 2 beta)."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if t < k:
        return np.array([0.5, 0.5])
    c = count_context(seq, t, k)
    denom = c.n + 2.0 * beta
    return np.array([(c.n0 + beta) / denom, (c.n1 + beta) / denom])


def transition_counts(seq, t: int) -> TransitionCounts:
    """Tally i->j transitions over consecutive pairs of x_1^t."""
    x = _tokens(seq)
    if t < 1 or t > len(x):
        raise ValueError(f"t={t} out of range for length {len(x)}")
    pair = 2 * x[: t - 1] + x[1:t]
    counts = np.bincount(pair, minlength=4)
    return TransitionCounts(n00=int(counts[0]), n01=int(counts[1]),
                            n10=int(counts[2]), n11=int(counts[3]))


def oracle_trace(seq, k: int, beta: float) -> np.ndarray:
    """Per-position add-beta predictions, shape (T, 2); row t-1 predicts x_{t+1}.

    Counts are updated incrementally per position, so the whole trace costs
    O(T) instead of re-scanning the prefix at every step.
    """
    x = _tokens(seq)
    T = len(x)
    out = np.empty((T, 2))
    n = np.zeros(1 << k)
    n1 = np.zeros(1 << k)
    mask = (1 << k) - 1
    code = 0
    for t in range(1, T + 1):
        tok = x[t - 1]
        if t > k:
            prev = code  # encodes x_{t-k}^{t-1}
            n[prev] += 1.0
            n1[prev] += tok
        code = ((code << 1) & mask) | tok
        if t < k:
            out[t - 1] = 0.5
        else:
            denom = n[code] + 2.0 * beta
            p1 = (n1[code] + beta) / denom
            out[t - 1] = ((n[code] - n1[code] + beta) / denom, p1)
    return out


def switching_predict(seq, t: int, k: int, beta: float, p_switch: float) -> np.ndarray:
    """Next-token law over {0, 1, S} with counts reset at the latest switch."""
    x = _tokens(seq)[:t]
    s_positions = np.flatnonzero(x == SWITCH_TOKEN)
    start = int(s_positions[-1]) + 1 if s_positions.size else 0
    segment = x[start:]
    if len(segment) < k:
        base = np.array([0.5, 0.5])
    else:
        base = add_beta_predict(segment, len(segment), k, beta)
    return np.array([(1.0 - p_switch) * base[0], (1.0 - p_switch) * base[1], p_switch])


def switching_trace(seq, k: int, beta: float, p_switch: float) -> np.ndarray:
    """Per-position switching-oracle predictions, shape (T, 3)."""
    x = _tokens(seq)
    T = len(x)
    out = np.empty((T, 3))
    out[:, 2] = p_switch
    scale = 1.0 - p_switch
    n = np.zeros(1 << k)
    n1 = np.zeros(1 << k)
    mask = (1 << k) - 1
    code = 0
    run = 0  # binary tokens since the last switch
    for t in range(1, T + 1):
        tok = x[t - 1]
        if tok == SWITCH_TOKEN:
            n[:] = 0.0
            n1[:] = 0.0
            code = 0
            run = 0
        else:
            run += 1
            if run > k:
                n[code] += 1.0
                n1[code] += tok
            code = ((code << 1) & mask) | tok
        if run < k:
            out[t - 1, :2] = 0.5 * scale
        else:
            denom = n[code] + 2.0 * beta
            out[t - 1, 0] = scale * (n[code] - n1[code] + beta) / denom
            out[t - 1, 1] = scale * (n1[code] + beta) / denom
    return out


def mean_nll(probs: np.ndarray, tokens: np.ndarray, start: int) -> float:
    """Mean negative log likelihood of tokens t+1 over positions t in [start, T-1].

    `probs` holds one predictive distribution per position (T, V); `start` is
    1-based. Raises InfiniteLossError if a realized token has probability 0.
    """
    T = len(tokens)
    if not 1 <= start <= T - 1:
        raise ValueError(f"start={start} leaves no scored positions for T={T}")
    picked = probs[np.arange(start - 1, T - 1), tokens[start:]]
    if np.any(picked <= 0.0):
        bad = int(np.flatnonzero(picked <= 0.0)[0]) + start + 1
        raise InfiniteLossError(bad)
    return float(-np.mean(np.log(picked)))


def oracle_loss(seqs, k: int, beta: float) -> float:
    """Empirical cross-entropy of the add-beta predictor on a batch.

    Mean over sequences of the per-sequence mean over positions t in [k, T-1].
    """
    if not seqs:
        raise ValueError("empty batch")
    losses = [mean_nll(oracle_trace(s, k, beta), _tokens(s), k) for s in seqs]
    return float(np.mean(losses))


def switching_oracle_loss(seqs, k: int, beta: float, p_switch: float) -> float:
    """Cross-entropy of the reset-at-switch oracle over positions t in [k, T-1]."""
    if not seqs:
        raise ValueError("empty batch")
    losses = [mean_nll(switching_trace(s, k, beta, p_switch), _tokens(s), k)
              for s in seqs]
    return float(np.mean(losses))


def write_oracle_trace(path, seq, k: int, beta: float, p_switch: float | None = None) -> None:
    """Dump a per-position oracle trace as CSV: t, context, n, n_1, P0, P1[, PS]."""
    x = _tokens(seq)
    switching = p_switch is not None
    trace = (switching_trace(x, k, beta, p_switch) if switching
             else oracle_trace(x, k, beta))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "context", "n", "n_1", "P0", "P1"] + (["PS"] if switching else []))
        for t in range(1, len(x) + 1):
            if switching:
                xt = x[:t]
                s_pos = np.flatnonzero(xt == SWITCH_TOKEN)
                seg = xt[int(s_pos[-1]) + 1 if s_pos.size else 0:]
            else:
                seg = x[:t]
            if len(seg) >= k:
                ctx = "".join(str(b) for b in seg[len(seg) - k:])
                c = count_context(seg, len(seg), k)
                n, n1 = c.n, c.n1
            else:
                ctx, n, n1 = "", 0, 0
            row = [t, ctx, n, n1, repr(float(trace[t - 1, 0])), repr(float(trace[t - 1, 1]))]
            if switching:
                row.append(repr(float(trace[t - 1, 2])))
            writer.writerow(row)
