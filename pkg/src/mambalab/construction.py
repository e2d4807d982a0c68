"""Exact minimal-variant parameters that realize the add-beta smoother.

For any beta > 0 and epsilon in (0, 1) there is a closed-form choice of the
2-dimensional minimal model (window 2, output-selection window 1) whose
prediction is within epsilon of the order-1 add-beta estimator in KL at every
position of every binary sequence, and exactly equal whenever the current
token differs from the first one. `build_exact_params` solves for those
weights; `verify_construction` certifies the bound by exhaustively
enumerating every binary sequence up to a length cap, reusing prefix states
along the depth-first tree so each position costs one recurrence step.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import (MambaConfig, MambaParams, RecurrentState, forward_step,
                    initial_state)
from .smoothing import TransitionCounts

_COND_TOL = 1e-12


@dataclass
class ConstructionSpec:
    """Solved coefficients: convolution kernels, head scales, embeddings.

    The kernel rows (alpha0, alpha1) and (gamma0, gamma1) must satisfy
      alpha0*gamma0 + alpha1*gamma1 = 0,
      alpha0*gamma1 + alpha1*gamma0 > 0,
      alpha0 != alpha1,
      alpha0*gamma1 / (alpha0*gamma1 + alpha1*gamma0) = -beta*epsilon.
    """

    beta: float
    epsilon: float
    alpha0: float
    alpha1: float
    gamma0: float
    gamma1: float
    c0: float
    c1: float
    e00: float
    e01: float
    e10: float
    e11: float

    def validate(self) -> None:
        cross = self.alpha0 * self.gamma1 + self.alpha1 * self.gamma0
        if abs(self.alpha0 * self.gamma0 + self.alpha1 * self.gamma1) > _COND_TOL:
            raise ValueError("kernel condition alpha0*gamma0 + alpha1*gamma1 = 0 violated")
        if not cross > 0:
            raise ValueError("kernel condition alpha0*gamma1 + alpha1*gamma0 > 0 violated")
        if self.alpha0 == self.alpha1:
            raise ValueError("kernel condition alpha0 != alpha1 violated")
        if abs(self.alpha0 * self.gamma1 / cross + self.beta * self.epsilon) > _COND_TOL:
            raise ValueError("kernel condition alpha0*gamma1/cross = -beta*epsilon violated")


def solve_construction(beta: float, epsilon: float) -> ConstructionSpec:
    """Closed-form solution with the normalization alpha1 = gamma1 = c0 = c1 = 1.

    The condition system then forces alpha0^2 = beta*eps / (1 + beta*eps) with
    the negative root (the positive one breaks the cross-term sign), and
    gamma0 = -1/alpha0.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    be = beta * epsilon
    alpha0 = -np.sqrt(be / (1.0 + be))
    gamma0 = -1.0 / alpha0
    cross = alpha0 + gamma0  # alpha0*gamma1 + alpha1*gamma0 with alpha1 = gamma1 = 1
    e_same = cross * beta - 1.0  # e00 = e11: minus alpha1*gamma1*c0
    e_diff = cross * beta - alpha0  # e01 = e10: minus alpha0*gamma1*c0
    spec = ConstructionSpec(beta=beta, epsilon=epsilon,
                            alpha0=float(alpha0), alpha1=1.0,
                            gamma0=float(gamma0), gamma1=1.0,
                            c0=1.0, c1=1.0,
                            e00=float(e_same), e01=float(e_diff),
                            e10=float(e_diff), e11=float(e_same))
    spec.validate()
    return spec


def construction_config() -> MambaConfig:
    return MambaConfig(d=2, n_state=2, e=1, w=2, w_c=1, variant="minimal",
                       alphabet_size=2)


def params_from_spec(spec: ConstructionSpec) -> tuple[MambaConfig, MambaParams]:
    """Assemble model weights realizing a solved construction.

    The state decay is pinned at one (a = 0, unit step), the input and state
    projections send the two embeddings to the coordinate axes, the output
    projection and head are the identity.
    """
    cfg = construction_config()
    e0 = np.array([spec.e00, spec.e01])
    e1 = np.array([spec.e10, spec.e11])
    M = np.column_stack([e0, e1])
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if abs(det) < 1e-9 * max(1.0, float(np.abs(M).max()) ** 2):
        raise ValueError(
            f"embedding vectors are collinear for beta={spec.beta}, "
            f"epsilon={spec.epsilon}; this (beta, epsilon) pair is degenerate")
    m_inv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
    scale_c = np.array([[spec.c0, 0.0], [0.0, spec.c1]])
    params = MambaParams(
        embed=np.stack([e0, e1]),
        a=np.asarray(0.0),
        w_delta=np.zeros((1, 2)),
        delta_bias=np.asarray(float(np.log(np.e - 1.0))),  # softplus -> 1
        w_x=m_inv.copy(),
        w_b=m_inv.copy(),
        w_c=scale_c @ m_inv,
        conv_x=np.array([[spec.alpha0, spec.alpha1]] * 2),
        conv_b=np.array([[spec.gamma0, spec.gamma1]] * 2),
        conv_c=np.ones((2, 1)),
        w_o=np.eye(2),
        lm_head=np.eye(2),
    )
    params.validate(cfg)
    return cfg, params


def build_exact_params(beta: float, epsilon: float, *,
                       perturb_alpha0: float = 0.0) -> tuple[MambaConfig, MambaParams]:
    """Solve and assemble; `perturb_alpha0` scales alpha0 by (1 + fraction) to
    produce deliberately broken weights for negative verification runs."""
    spec = solve_construction(beta, epsilon)
    if perturb_alpha0:
        spec.alpha0 *= 1.0 + perturb_alpha0
        # conditions intentionally no longer hold; skip re-validation
    return params_from_spec(spec)


def closed_form_prediction(x1: int, xt: int, counts: TransitionCounts,
                           beta: float, epsilon: float) -> np.ndarray:
    """The constructed model's output as an explicit function of counts.

    Matches the add-beta estimator exactly when x1 != xt; when x1 == xt an
    extra beta*epsilon lands on the cross-transition count.
    """
    be = beta * epsilon
    if xt == 0:
        extra = be if x1 == 0 else 0.0
        denom = counts.n00 + counts.n01 + 2.0 * beta + extra
        return np.array([(counts.n00 + beta) / denom,
                         (counts.n01 + beta + extra) / denom])
    extra = be if x1 == 1 else 0.0
    denom = counts.n10 + counts.n11 + 2.0 * beta + extra
    return np.array([(counts.n10 + beta + extra) / denom,
                     (counts.n11 + beta) / denom])


EXACT_TOL = 1e-12


@dataclass
class Certificate:
    """Result of exhaustively checking the KL bound up to length t_max.

    Certification requires both halves of the claim: KL at most epsilon at
    every enumerated position, and exact agreement (KL <= 1e-12) wherever the
    current token differs from the first one.
    """

    beta: float
    epsilon: float
    t_max: int
    max_kl: float
    witness_sequence: str
    witness_position: int
    exact_match_count: int  # positions with x_1 != x_t
    max_kl_mismatched: float  # max KL over those positions
    max_kl_matched: float  # max KL where x_1 == x_t (bound: log(1+eps))
    positions_checked: int
    min_logit: float
    certified: bool
    runtime_seconds: float = 0.0
    failure: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def verify_construction(params: MambaParams, beta: float, epsilon: float,
                        t_max: int, cfg: MambaConfig | None = None) -> Certificate:
    """Enumerate all binary sequences of length 1..t_max and bound the KL gap.

    Walks the binary sequence tree depth-first, carrying the model state and
    the order-1 transition counts incrementally, so every enumerated position
    costs one recurrence step. Any non-distribution model output fails the
    certificate with the offending sequence and position.
    """
    if cfg is None:
        cfg = construction_config()
    start = time.perf_counter()
    cert = Certificate(beta=beta, epsilon=epsilon, t_max=t_max,
                       max_kl=-np.inf, witness_sequence="", witness_position=0,
                       exact_match_count=0, max_kl_mismatched=-np.inf,
                       max_kl_matched=-np.inf, positions_checked=0,
                       min_logit=np.inf, certified=False)
    counts = np.zeros((2, 2))
    prefix: list[int] = []

    def visit(state: RecurrentState, x1: int) -> bool:
        t = len(prefix)
        for tok in (0, 1):
            prefix.append(tok)
            if t >= 1:
                counts[prefix[-2], tok] += 1
            try:
                new_state, probs, extra = forward_step(params, cfg, state, tok,
                                                       head_strict=True,
                                                       want_internals=True)
            except ValueError as err:
                cert.failure = f"{err} on sequence {''.join(map(str, prefix))}"
                return False
            first = prefix[0] if t == 0 else x1
            n_row = counts[tok]
            denom = n_row.sum() + 2.0 * beta
            oracle = np.array([(n_row[0] + beta) / denom, (n_row[1] + beta) / denom])
            kl = _kl(oracle, probs)
            cert.positions_checked += 1
            cert.min_logit = min(cert.min_logit, float(extra["logits"].min()))
            if kl > cert.max_kl:
                cert.max_kl = kl
                cert.witness_sequence = "".join(map(str, prefix))
                cert.witness_position = t + 1
            if first != tok:
                cert.exact_match_count += 1
                cert.max_kl_mismatched = max(cert.max_kl_mismatched, kl)
            else:
                cert.max_kl_matched = max(cert.max_kl_matched, kl)
            ok = True
            if t + 1 < t_max:
                ok = visit(new_state, first)
            if t >= 1:
                counts[prefix[-2], tok] -= 1
            prefix.pop()
            if not ok:
                return False
        return True

    ok = visit(initial_state(cfg), -1)
    cert.certified = (ok and cert.max_kl <= epsilon
                      and cert.max_kl_mismatched <= EXACT_TOL)
    cert.runtime_seconds = time.perf_counter() - start
    return cert
