"""Closed-form construction: condition system, forward agreement, certification."""

import numpy as np
import pytest

from mambalab import construction as cons
from mambalab import model, smoothing

GRID = [(0.5, 0.1), (0.5, 0.01), (1.0, 0.1), (1.0, 0.01), (2.0, 0.1), (2.0, 0.01)]


def test_solved_coefficients_match_closed_form():
    spec = cons.solve_construction(1.0, 0.01)
    assert spec.alpha0 == pytest.approx(-np.sqrt(0.01 / 1.01), abs=1e-15)
    assert spec.alpha0 == pytest.approx(-0.0995037, abs=1e-7)
    assert spec.gamma0 == pytest.approx(10.0498756, abs=1e-7)


@pytest.mark.parametrize("beta,eps", GRID)
def test_kernel_conditions_hold(beta, eps):
    spec = cons.solve_construction(beta, eps)
    cross = spec.alpha0 * spec.gamma1 + spec.alpha1 * spec.gamma0
    assert abs(spec.alpha0 * spec.gamma0 + spec.alpha1 * spec.gamma1) <= 1e-12
    assert cross > 0
    assert spec.alpha0 != spec.alpha1
    assert abs(spec.alpha0 * spec.gamma1 / cross + beta * eps) <= 1e-12


def test_parameter_validation():
    with pytest.raises(ValueError):
        cons.solve_construction(1.0, 1.5)
    with pytest.raises(ValueError):
        cons.solve_construction(1.0, 0.0)
    with pytest.raises(ValueError):
        cons.solve_construction(-1.0, 0.5)


def test_degenerate_pair_with_collinear_embeddings_rejected():
    # beta = 0.1, eps = 2/3 makes e_0 and e_1 antiparallel
    with pytest.raises(ValueError, match="collinear"):
        cons.build_exact_params(0.1, 2.0 / 3.0)


def test_decay_is_pinned_at_one():
    cfg, params = cons.build_exact_params(1.0, 0.01)
    assert float(params.a) == 0.0
    seq = np.random.default_rng(0).integers(0, 2, size=32)
    trace = model.forward_sequence(params, cfg, seq)
    np.testing.assert_array_equal(trace.a, np.ones(32))


def test_closed_form_prediction_examples():
    p = cons.closed_form_prediction(1, 0, smoothing.TransitionCounts(n00=2, n01=1),
                                    1.0, 0.01)
    np.testing.assert_allclose(p, [0.6, 0.4], rtol=0, atol=1e-15)
    p = cons.closed_form_prediction(0, 0, smoothing.TransitionCounts(), 1.0, 0.01)
    np.testing.assert_allclose(p, [1.0 / 2.01, 1.01 / 2.01], rtol=0, atol=1e-16)


def test_forward_matches_closed_form_on_fixed_input():
    cfg, params = cons.build_exact_params(1.0, 0.01)
    seq = [0, 1, 0, 0]
    trace = model.forward_sequence(params, cfg, seq)
    for t in range(1, 5):
        counts = smoothing.transition_counts(seq, t)
        expected = cons.closed_form_prediction(seq[0], seq[t - 1], counts, 1.0, 0.01)
        np.testing.assert_allclose(trace.probs[t - 1], expected, rtol=0, atol=1e-9)


@pytest.mark.parametrize("beta,eps", [(1.0, 0.01), (0.5, 0.1)])
def test_forward_matches_closed_form_on_random_sequences(beta, eps):
    cfg, params = cons.build_exact_params(beta, eps)
    rng = np.random.default_rng(99)
    for _ in range(1000):
        T = int(rng.integers(1, 25))
        seq = rng.integers(0, 2, size=T)
        trace = model.forward_sequence(params, cfg, seq)
        for t in range(1, T + 1):
            counts = smoothing.transition_counts(seq, t)
            expected = cons.closed_form_prediction(int(seq[0]), int(seq[t - 1]),
                                                   counts, beta, eps)
            np.testing.assert_allclose(trace.probs[t - 1], expected,
                                       rtol=0, atol=1e-9)


def test_closed_form_within_log_one_plus_eps_of_add_beta():
    # count-space sweep: the KL penalty of the extra beta*eps term
    beta, eps = 1.0, 0.1
    n00, n01 = np.meshgrid(np.arange(201.0), np.arange(201.0), indexing="ij")
    denom = n00 + n01 + 2 * beta
    p0, p1 = (n00 + beta) / denom, (n01 + beta) / denom
    qden = n00 + n01 + 2 * beta + beta * eps
    q0, q1 = (n00 + beta) / qden, (n01 + beta + beta * eps) / qden
    kl = p0 * np.log(p0 / q0) + p1 * np.log(p1 / q1)
    assert kl.max() <= np.log(1 + eps) + 1e-15
    assert np.log(1 + eps) <= eps


def test_exact_agreement_when_tokens_differ():
    cert = _cert(1.0, 0.01, t_max=10)
    assert cert.max_kl_mismatched <= 1e-12
    assert cert.exact_match_count == (cert.positions_checked - 2) // 2
    assert cert.min_logit > 0


def _cert(beta, eps, t_max):
    cfg, params = cons.build_exact_params(beta, eps)
    return cons.verify_construction(params, beta, eps, t_max)


def test_certificate_bounds_hold():
    cert = _cert(1.0, 0.01, t_max=12)
    assert cert.certified
    assert cert.max_kl <= 0.01
    assert cert.max_kl_matched <= np.log(1.01)
    assert cert.positions_checked == 2**13 - 2


@pytest.mark.parametrize("beta,eps", GRID)
def test_certificates_across_grid(beta, eps):
    cert = _cert(beta, eps, t_max=8)
    assert cert.certified and cert.max_kl <= eps


def test_certificate_max_kl_monotone_in_t_max():
    a = _cert(1.0, 0.1, t_max=6)
    b = _cert(1.0, 0.1, t_max=9)
    assert a.max_kl <= b.max_kl
    assert b.certified


def test_perturbed_construction_fails_certification():
    cfg, params = cons.build_exact_params(1.0, 0.01, perturb_alpha0=0.10)
    cert = cons.verify_construction(params, 1.0, 0.01, 12)
    assert not cert.certified
    assert cert.max_kl_mismatched > 1e-12
    assert cert.witness_sequence
