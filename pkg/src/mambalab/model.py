"""Single-layer Mamba-style language model over a tiny token alphabet.

Two variants share one parameterization:

* ``full``: embedding, selective-SSM block (input-dependent decay, causal
  per-dimension convolutions, ReLU selectivity, multiplicative gating),
  residual MLP, linear head, softmax prediction.
* ``minimal``: embedding, convolutional selectivity without ReLU, the linear
  state recurrence, linear head, L1-normalized prediction. This is the
  smallest configuration that can still represent the add-beta smoother.

Ablation switches (`use_conv`, `use_relu`, `use_gating`) remove one mechanism
at a time from the full variant. Forward passes come in two flavors that are
tested to agree: a per-step recurrent form (`forward_step`,
`forward_sequence`) and a batched blocked form (`forward_batched`) whose
inputs may be autodiff tensors, which is what training differentiates
through.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from dataclasses import fields as dataclasses_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad

L1_FLOOR = 1e-12

# delta_bias init: softplus(log(e - 1)) == 1
_DELTA_BIAS_UNIT = float(np.log(np.e - 1.0))


class DegenerateLogitError(ValueError):
    """Every logit fell at or below the L1-head floor."""


@dataclass
class MambaConfig:
    """Architecture switches and dimensions.

    `w` is the convolution window for the x and b selectivity terms; `w_c`
    (defaulting to `w`) is the window of the output-selection term, which may
    be one smaller without losing anything. `prediction_head` defaults to
    softmax for the full variant and l1norm for the minimal one.
    """

    d: int = 8
    n_state: int = 8
    e: int = 1
    w: int = 2
    w_c: int | None = None
    variant: str = "full"  # "full" | "minimal"
    prediction_head: str | None = None  # "softmax" | "l1norm"
    use_conv: bool = True
    use_relu: bool = True
    use_gating: bool = True
    mlp_additive: bool = False
    alphabet_size: int = 2

    def __post_init__(self):
        if self.variant not in ("full", "minimal"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "minimal":
            # the minimal variant has no ReLU selectivity and no gating
            self.use_relu = False
            self.use_gating = False
        if self.prediction_head is None:
            self.prediction_head = "l1norm" if self.variant == "minimal" else "softmax"
        if self.prediction_head not in ("softmax", "l1norm"):
            raise ValueError(f"unknown prediction head {self.prediction_head!r}")
        if self.w_c is None:
            self.w_c = self.w
        if min(self.d, self.n_state, self.e, self.w, self.w_c) < 1:
            raise ValueError("dimensions d, n_state, e, w, w_c must all be >= 1")
        if self.alphabet_size not in (2, 3):
            raise ValueError("alphabet_size must be 2 (binary) or 3 (switching)")

    @property
    def ed(self) -> int:
        return self.e * self.d

    @property
    def conv_width(self) -> int:
        return self.w if self.use_conv else 1

    @property
    def conv_c_width(self) -> int:
        return self.w_c if self.use_conv else 1

    @property
    def has_mlp(self) -> bool:
        return self.variant == "full"

    @property
    def has_gate(self) -> bool:
        return self.variant == "full" and self.use_gating


@dataclass
class MambaParams:
    """All learnable tensors. Optional fields are None when the config drops them.

    The separate projections (w_x, w_z, w_b, w_c, w_delta) pack into the fused
    (2ed + 2N + 1) x d input projection used by stock implementations, and
    conv_x/conv_b/conv_c into its (ed + 2N) x w convolution, row for row; they
    are kept apart here for unit-testable structure.
    """

    embed: np.ndarray  # (V, d)
    a: np.ndarray  # () state decay rate, >= 0
    w_delta: np.ndarray  # (1, d)
    delta_bias: np.ndarray  # ()
    w_x: np.ndarray  # (ed, d)
    w_b: np.ndarray  # (N, d)
    w_c: np.ndarray  # (N, d)
    conv_x: np.ndarray  # (ed, conv_width)
    conv_b: np.ndarray  # (N, conv_width)
    conv_c: np.ndarray  # (N, conv_c_width)
    w_o: np.ndarray  # (d, ed)
    lm_head: np.ndarray  # (V, d)
    w_z: np.ndarray | None = None  # (ed, d) when gating
    mlp_w1: np.ndarray | None = None  # (4d, d)
    mlp_w2: np.ndarray | None = None  # (d, 4d)
    mlp_w3: np.ndarray | None = None  # (4d, d)

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for f in dataclasses_fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MambaParams":
        return cls(**{k: np.asarray(v) for k, v in d.items()})

    def validate(self, cfg: MambaConfig) -> None:
        for name, shape in param_shapes(cfg).items():
            arr = getattr(self, name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise ValueError(f"param {name}: shape {got} != {shape}")
        if float(self.a) < 0:
            raise ValueError(f"state decay rate a must be >= 0, got {float(self.a)}")


def param_shapes(cfg: MambaConfig) -> dict[str, tuple]:
    """Expected array shape per parameter name for a config."""
    d, N, ed, V = cfg.d, cfg.n_state, cfg.ed, cfg.alphabet_size
    shapes = {
        "embed": (V, d),
        "a": (),
        "w_delta": (1, d),
        "delta_bias": (),
        "w_x": (ed, d),
        "w_b": (N, d),
        "w_c": (N, d),
        "conv_x": (ed, cfg.conv_width),
        "conv_b": (N, cfg.conv_width),
        "conv_c": (N, cfg.conv_c_width),
        "w_o": (d, ed),
        "lm_head": (V, d),
    }
    if cfg.has_gate:
        shapes["w_z"] = (ed, d)
    if cfg.has_mlp:
        shapes["mlp_w1"] = (4 * d, d)
        shapes["mlp_w2"] = (d, 4 * d)
        shapes["mlp_w3"] = (4 * d, d)
    return shapes


def init_params(cfg: MambaConfig, rng: np.random.Generator) -> MambaParams:
    """Fan-in-scaled Gaussian weights; a = 0.5; delta_bias with softplus = 1.

    Each matrix is drawn i.i.d. Gaussian with std 1/sqrt(fan_in) (the last
    axis: input dim for projections, kernel width for convolutions, embedding
    dim for the token table). A uniformly tiny init leaves the multiplicative
    selectivity path orders of magnitude below the residual path and the
    model never escapes the uniform-prediction plateau.
    """
    fields = {}
    for name, shape in param_shapes(cfg).items():
        if name == "a":
            fields[name] = np.asarray(0.5)
        elif name == "delta_bias":
            fields[name] = np.asarray(_DELTA_BIAS_UNIT)
        else:
            fields[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)
    return MambaParams(**fields)


# ---------------------------------------------------------------------------
# per-step recurrent inference

@dataclass
class RecurrentState:
    """State carried between steps: H, the recent-token buffer, the position."""

    H: np.ndarray  # (ed, N)
    window: list = field(default_factory=list)  # most recent token last
    t: int = 0


def initial_state(cfg: MambaConfig) -> RecurrentState:
    return RecurrentState(H=np.zeros((cfg.ed, cfg.n_state)))


def _conv_at_step(weight, kernel, embed, window):
    """Causal conv of projected embeddings at the newest window position."""
    width = kernel.shape[1]
    out = np.zeros(weight.shape[0])
    for back, tok in enumerate(reversed(window)):
        j = width - 1 - back
        if j < 0:
            break
        out += kernel[:, j] * (weight @ embed[tok])
    return out


def selectivity(params: MambaParams, cfg: MambaConfig, window) -> tuple:
    """Input-selective terms (a_t, x_tilde_t, b_t, c_t) for a token window.

    `window` holds the most recent min(t, window width) raw tokens, current
    token last. Positions before the sequence start act as zero padding.
    """
    if not len(window):
        raise ValueError("empty token window")
    token = window[-1]
    x_t = params.embed[token]
    delta = float(np.logaddexp(0.0, params.w_delta[0] @ x_t + params.delta_bias))
    a_t = float(np.exp(-float(params.a) * delta))
    cx = _conv_at_step(params.w_x, params.conv_x, params.embed, window)
    cb = _conv_at_step(params.w_b, params.conv_b, params.embed, window)
    cc = _conv_at_step(params.w_c, params.conv_c, params.embed, window)
    if cfg.use_relu:
        cx, cb, cc = np.maximum(cx, 0), np.maximum(cb, 0), np.maximum(cc, 0)
    return a_t, cx * delta, cb, cc


def _head_probs(logits: np.ndarray, cfg: MambaConfig, strict: bool, where: str):
    if cfg.prediction_head == "softmax":
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()
    if strict and logits.max() <= L1_FLOOR:
        raise DegenerateLogitError(f"all logits at or below {L1_FLOOR} {where}")
    clamped = np.maximum(logits, L1_FLOOR)
    return clamped / clamped.sum()


def forward_step(params: MambaParams, cfg: MambaConfig, state: RecurrentState,
                 token: int, head_strict: bool = True,
                 want_internals: bool = False):
    """Consume one token; return (new state, next-token distribution).

    With ``want_internals`` the return gains a dict of per-step diagnostics
    (a_t, x_tilde, b, c, y, z, o). ``head_strict`` controls whether an
    all-at-floor L1 logit vector raises or degrades to uniform.
    """
    if not 0 <= token < cfg.alphabet_size:
        raise ValueError(f"token {token} outside alphabet of size {cfg.alphabet_size}")
    max_w = max(cfg.conv_width, cfg.conv_c_width)
    window = (state.window + [int(token)])[-max_w:]
    a_t, x_tilde, b_t, c_t = selectivity(params, cfg, window)
    if not 0.0 < a_t <= 1.0:
        raise ValueError(f"state decay a_t={a_t} outside (0, 1]; is a >= 0?")
    H = a_t * state.H + np.outer(x_tilde, b_t)
    y = H @ c_t
    x_t = params.embed[token]
    z = y * np.maximum(params.w_z @ x_t, 0.0) if cfg.has_gate else y
    o = params.w_o @ z
    u = x_t + o
    if cfg.has_mlp:
        h1 = np.maximum(params.mlp_w1 @ u, 0.0)
        h3 = params.mlp_w3 @ u
        h = h1 + h3 if cfg.mlp_additive else h1 * h3
        v = u + params.mlp_w2 @ h
    else:
        v = u
    logits = params.lm_head @ v
    probs = _head_probs(logits, cfg, head_strict, f"at position {state.t + 1}")
    new_state = RecurrentState(H=H, window=window, t=state.t + 1)
    if want_internals:
        return new_state, probs, {"a": a_t, "x_tilde": x_tilde, "b": b_t,
                                  "c": c_t, "y": y, "z": z, "o": o,
                                  "logits": logits}
    return new_state, probs


@dataclass
class PredictionTrace:
    """Per-position predictive distributions and decay factors."""

    probs: np.ndarray  # (T, V); row t-1 is the law of token t+1
    a: np.ndarray  # (T,)
    internals: dict | None = None


def forward_sequence(params: MambaParams, cfg: MambaConfig, seq,
                     head_strict: bool = True,
                     record_internals: bool = False) -> PredictionTrace:
    """Fold forward_step over a sequence."""
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq)
    if len(tokens) == 0:
        raise ValueError("empty sequence")
    state = initial_state(cfg)
    probs = np.empty((len(tokens), cfg.alphabet_size))
    a_vals = np.empty(len(tokens))
    recorded: dict[str, list] = {}
    for i, tok in enumerate(tokens):
        state, p, extra = forward_step(params, cfg, state, int(tok),
                                       head_strict, want_internals=True)
        probs[i] = p
        a_vals[i] = extra["a"]
        if record_internals:
            for key, val in extra.items():
                recorded.setdefault(key, []).append(val)
    internals = ({k: np.asarray(v) for k, v in recorded.items()}
                 if record_internals else None)
    return PredictionTrace(probs=probs, a=a_vals, internals=internals)


# ---------------------------------------------------------------------------
# batched blocked forward (tape-differentiable)

@dataclass
class BatchedForward:
    """Blocked forward results; column t*B + s is step t of batch element s."""

    probs: object  # (V, T*B) Tensor or ndarray
    a: object  # (1, T*B)
    n_steps: int
    batch: int


def forward_batched(params: dict, cfg: MambaConfig, tokens: np.ndarray,
                    head_strict: bool = False) -> BatchedForward:
    """Whole-batch forward over (B, T) tokens in time-major blocked layout.

    `params` maps parameter names to autodiff tensors or plain arrays; with
    tensors the result is differentiable. The L1 head clamps logits at the
    floor (uniform in the fully degenerate case) unless ``head_strict``.
    """
    B, T = tokens.shape
    V = cfg.alphabet_size
    flat = tokens.T.reshape(-1)
    emb_t = ad.transpose(params["embed"])  # (d, V)
    x_all = ad.gather_cols(emb_t, flat)

    delta = ad.softplus(ad.add(
        ad.gather_cols(ad.matmul(params["w_delta"], emb_t), flat),
        params["delta_bias"]))
    a_row = ad.exp(ad.neg(ad.mul(params["a"], delta)))

    # The alphabet is tiny, so each causal conv takes at most (V+1)^width
    # distinct values (sentinel V = zero padding left of the start). Build
    # that small table on the tape and gather per position.
    def window_codes(width):
        padded = np.full((B, T + width - 1), V, dtype=np.int64)
        padded[:, width - 1:] = tokens
        wins = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)
        powers = (V + 1) ** np.arange(width - 1, -1, -1)
        return (wins @ powers).T.reshape(-1)

    def conv_table(weight, kernel):
        width = kernel.shape[1]
        proj = ad.concat_cols([ad.matmul(weight, emb_t),
                               np.zeros((weight.shape[0], 1))])  # (dim, V+1)
        codes = np.arange((V + 1) ** width)
        table = None
        for j in range(width):
            digits = codes // (V + 1) ** (width - 1 - j) % (V + 1)
            term = ad.mul(ad.cols(kernel, j, j + 1), ad.gather_cols(proj, digits))
            table = term if table is None else ad.add(table, term)
        return table, width

    tab_x, w_x_width = conv_table(params["w_x"], params["conv_x"])
    tab_b, _ = conv_table(params["w_b"], params["conv_b"])  # same width as x
    tab_c, w_c_width = conv_table(params["w_c"], params["conv_c"])
    if cfg.use_relu:
        tab_x, tab_b, tab_c = ad.relu(tab_x), ad.relu(tab_b), ad.relu(tab_c)
    codes_xb = window_codes(w_x_width)
    codes_c = codes_xb if w_c_width == w_x_width else window_codes(w_c_width)
    cx = ad.gather_cols(tab_x, codes_xb)
    cb = ad.gather_cols(tab_b, codes_xb)
    cc = ad.gather_cols(tab_c, codes_c)
    x_tilde = ad.mul(cx, delta)

    y = ad.ssm_scan(a_row, x_tilde, cb, cc, T)
    if cfg.has_gate:
        gate = ad.gather_cols(ad.relu(ad.matmul(params["w_z"], emb_t)), flat)
        y = ad.mul(y, gate)
    u = ad.add(x_all, ad.matmul(params["w_o"], y))
    if cfg.has_mlp:
        h1 = ad.relu(ad.matmul(params["mlp_w1"], u))
        h3 = ad.matmul(params["mlp_w3"], u)
        h = ad.add(h1, h3) if cfg.mlp_additive else ad.mul(h1, h3)
        v = ad.add(u, ad.matmul(params["mlp_w2"], h))
    else:
        v = u
    logits = ad.matmul(params["lm_head"], v)

    if cfg.prediction_head == "softmax":
        probs = ad.softmax(logits)
    else:
        vals = logits.value if isinstance(logits, ad.Tensor) else logits
        dead = vals.max(axis=0) <= L1_FLOOR
        if head_strict and dead.any():
            col = int(np.flatnonzero(dead)[0])
            raise DegenerateLogitError(
                f"all logits at or below {L1_FLOOR} at position {col // B + 1}, "
                f"batch element {col % B}")
        probs = ad.l1_normalize(ad.clamp_min(logits, L1_FLOOR))
    return BatchedForward(probs=probs, a=a_row, n_steps=T, batch=B)


def batched_trace(params: MambaParams, cfg: MambaConfig,
                  tokens: np.ndarray) -> np.ndarray:
    """Per-sequence traces from one batched forward: (B, T, V) probabilities."""
    out = forward_batched(params.as_dict(), cfg, tokens)
    B, T = tokens.shape
    return np.transpose(out.probs.reshape(cfg.alphabet_size, T, B), (2, 1, 0))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, cfg: MambaConfig, params: MambaParams,
                    train_state: dict | None = None) -> None:
    """JSON checkpoint; float64 values survive the round trip bit-exactly."""
    doc = {
        "config": asdict(cfg),
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                   for name, arr in params.as_dict().items()},
    }
    if train_state is not None:
        doc["train_state"] = train_state
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    cfg = MambaConfig(**doc["config"])
    params = MambaParams.from_dict({
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["params"].items()})
    params.validate(cfg)
    return cfg, params, doc.get("train_state")
