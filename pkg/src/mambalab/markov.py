"""Random Markov chain generation with Dirichlet-sampled kernels.

Sequences are binary (alphabet {0, 1}); the switching variant adds a switch
token, encoded as the integer 2, after which the chain restarts with a fresh
kernel. All generators are pure functions of (config, generator state):
fixed seeds reproduce sequences bit-exactly, and batches split their
generator into one independent child stream per element so results do not
depend on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

SWITCH_TOKEN = 2

_CHARS = {0: "0", 1: "1", SWITCH_TOKEN: "S"}
_TOKENS = {c: t for t, c in _CHARS.items()}


@dataclass
class MarkovKernel:
    """Order-k conditional distribution table over the binary alphabet.

    `probs[code]` is (P(0|ctx), P(1|ctx)) where `code` encodes the length-k
    context with the oldest token in the most significant bit.
    """

    order: int
    beta: float
    probs: np.ndarray  # (2**order, 2)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.probs.shape != (2**self.order, 2):
            raise ValueError(f"kernel table shape {self.probs.shape} != ({2**self.order}, 2)")
        sums = self.probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12) or np.any(self.probs < 0):
            raise ValueError("kernel rows must be distributions summing to 1")

    def row(self, context) -> np.ndarray:
        """Distribution of the next token given a length-k context tuple."""
        return self.probs[context_code(context)]


def context_code(context) -> int:
    """Encode a binary context, oldest token first, as an integer."""
    code = 0
    for bit in context:
        code = (code << 1) | int(bit)
    return code


@dataclass
class TokenSequence:
    """Tokens plus generation metadata."""

    tokens: np.ndarray
    alphabet: str = "binary"  # "binary" or "switching"
    seed: object = None  # provenance label, not consumed by the library
    kernel: MarkovKernel | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        hi = SWITCH_TOKEN if self.alphabet == "switching" else 1
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() > hi):
            raise ValueError(f"tokens outside alphabet {self.alphabet!r}")

    def __len__(self):
        return len(self.tokens)

    def text(self) -> str:
        return "".join(_CHARS[t] for t in self.tokens.tolist())


@dataclass
class SwitchingConfig:
    """Parameters of the switching Markov process."""

    k: int = 1
    beta: float = 1.0
    p_switch: float = 0.01
    T: int = 256

    def __post_init__(self):
        if not 0.0 <= self.p_switch <= 1.0:
            raise ValueError(f"p_switch must be in [0, 1], got {self.p_switch}")
        if self.k < 1 or self.beta <= 0 or self.T < 1:
            raise ValueError("need k >= 1, beta > 0, T >= 1")


def sample_kernel(k: int, beta: float, rng: np.random.Generator) -> MarkovKernel:
    """Draw an order-k kernel with each row ~ Dirichlet(beta, beta).

    Rows are formed from two Gamma(beta, 1) draws normalized to sum 1, which
    is valid for every beta > 0.
    """
    if k < 1:
        raise ValueError(f"order must be >= 1, got {k}")
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    raw = rng.gamma(beta, 1.0, size=(2**k, 2))
    probs = raw / raw.sum(axis=1, keepdims=True)
    return MarkovKernel(order=k, beta=beta, probs=probs)


@numba.njit(cache=True)
def _fill_chain(tokens, u, p1, k, mask):
    code = 0
    for j in range(k):
        code = ((code << 1) | tokens[j]) & mask
    for i in range(u.shape[0]):
        bit = 1 if u[i] < p1[code] else 0
        tokens[k + i] = bit
        code = ((code << 1) & mask) | bit


def sample_sequence(kernel: MarkovKernel, T: int, rng: np.random.Generator,
                    seed_label=None) -> TokenSequence:
    """Generate T tokens: the first k uniform, the rest from the kernel."""
    k = kernel.order
    if T < k:
        raise ValueError(f"T={T} shorter than order k={k}")
    tokens = np.empty(T, dtype=np.int64)
    tokens[:k] = rng.integers(0, 2, size=k)
    if T > k:
        u = rng.random(T - k)
        _fill_chain(tokens, u, np.ascontiguousarray(kernel.probs[:, 1]),
                    k, (1 << k) - 1)
    return TokenSequence(tokens, alphabet="binary", seed=seed_label, kernel=kernel)


def sample_switching(cfg: SwitchingConfig, rng: np.random.Generator,
                     seed_label=None) -> TokenSequence:
    """Generate a switching sequence over {0, 1, S}.

    Every position is a switch token with probability p_switch; each switch
    resamples the kernel, and the first k tokens after it (and at the start)
    are uniform on {0, 1}.
    """
    k, mask = cfg.k, (1 << cfg.k) - 1
    tokens = np.empty(cfg.T, dtype=np.int64)
    p1 = sample_kernel(k, cfg.beta, rng).probs[:, 1]
    run = 0  # binary tokens emitted since the last switch (or start)
    code = 0
    for t in range(cfg.T):
        if rng.random() < cfg.p_switch:
            tokens[t] = SWITCH_TOKEN
            p1 = sample_kernel(k, cfg.beta, rng).probs[:, 1]
            run = 0
            code = 0
        elif run < k:
            bit = int(rng.integers(0, 2))
            tokens[t] = bit
            code = ((code << 1) & mask) | bit
            run += 1
        else:
            bit = 1 if rng.random() < p1[code] else 0
            tokens[t] = bit
            code = ((code << 1) & mask) | bit
            run += 1
    return TokenSequence(tokens, alphabet="switching", seed=seed_label)


def sample_batch(k: int, beta: float, T: int, B: int,
                 rng: np.random.Generator) -> list[TokenSequence]:
    """B independent (kernel, sequence) pairs, one child stream per element."""
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    out = []
    for i, child in enumerate(rng.spawn(B)):
        kernel = sample_kernel(k, beta, child)
        out.append(sample_sequence(kernel, T, child, seed_label=i))
    return out


def sample_switching_batch(cfg: SwitchingConfig, B: int,
                           rng: np.random.Generator) -> list[TokenSequence]:
    """B independent switching sequences, one child stream per element."""
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    return [sample_switching(cfg, child, seed_label=i)
            for i, child in enumerate(rng.spawn(B))]


def batch_tokens(seqs: list[TokenSequence]) -> np.ndarray:
    """Stack equal-length sequences into a (B, T) token array."""
    return np.stack([s.tokens for s in seqs])


# ---------------------------------------------------------------------------
# file interface: one sequence per line as 0/1/S characters, plus a JSON
# manifest carrying seeds and configs (written by the CLI).

def write_sequences(path, seqs: list[TokenSequence]) -> None:
    Path(path).write_text("".join(s.text() + "\n" for s in seqs))


def read_sequences(path) -> list[TokenSequence]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        tokens = [_TOKENS[c] for c in line]
        alphabet = "switching" if SWITCH_TOKEN in tokens else "binary"
        out.append(TokenSequence(np.asarray(tokens), alphabet=alphabet))
    return out
