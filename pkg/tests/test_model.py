"""Model stack: shapes, selectivity math, recurrence, causality, ablations."""

import numpy as np
import pytest

from mambalab import model
from mambalab.model import MambaConfig, MambaParams


def tiny_params():
    """Fixed d=N=2, w=2 weights for hand-checked selectivity."""
    return MambaParams(
        embed=np.array([[1.0, 0.0], [0.0, 1.0]]),
        a=np.asarray(0.7),
        w_delta=np.array([[0.3, -0.2]]),
        delta_bias=np.asarray(0.1),
        w_x=np.array([[1.0, 2.0], [3.0, 4.0]]),
        w_b=np.eye(2),
        w_c=np.array([[2.0, 0.0], [0.0, 2.0]]),
        conv_x=np.array([[0.5, 1.0], [-2.0, 0.5]]),
        conv_b=np.ones((2, 2)),
        conv_c=np.array([[1.0, 0.5], [0.5, 1.0]]),
        w_o=np.eye(2),
        lm_head=np.eye(2),
    )


def tiny_cfg():
    return MambaConfig(d=2, n_state=2, e=1, w=2, variant="minimal",
                       use_relu=True)


# -- config resolution --------------------------------------------------------

def test_minimal_variant_forces_simplifications():
    cfg = MambaConfig(variant="minimal", use_relu=True, use_gating=True)
    assert not cfg.use_relu and not cfg.use_gating
    assert cfg.prediction_head == "l1norm"
    assert MambaConfig(variant="full").prediction_head == "softmax"


def test_config_validation():
    with pytest.raises(ValueError):
        MambaConfig(d=0)
    with pytest.raises(ValueError):
        MambaConfig(variant="tiny")
    with pytest.raises(ValueError):
        MambaConfig(alphabet_size=4)


# -- parameter initialization -------------------------------------------------

def test_init_shapes_match_config():
    cfg = MambaConfig(d=8, n_state=8, e=2, w=3)
    params = model.init_params(cfg, np.random.default_rng(0))
    params.validate(cfg)
    shapes = model.param_shapes(cfg)
    assert shapes["w_x"] == (16, 8)
    assert shapes["conv_x"] == (16, 3)
    assert shapes["mlp_w1"] == (32, 8)
    assert shapes["lm_head"] == (2, 8)


def test_separate_projections_pack_into_fused_layout():
    # rows of the separate input projections total the stock fused
    # (2ed + 2N + 1) x d projection; the convs total (ed + 2N) x w
    cfg = MambaConfig(d=8, n_state=4, e=2, w=3)
    shapes = model.param_shapes(cfg)
    ed, N, d = cfg.ed, cfg.n_state, cfg.d
    in_rows = (shapes["w_x"][0] + shapes["w_z"][0] + shapes["w_b"][0]
               + shapes["w_c"][0] + shapes["w_delta"][0])
    assert in_rows == 2 * ed + 2 * N + 1
    conv_rows = shapes["conv_x"][0] + shapes["conv_b"][0] + shapes["conv_c"][0]
    assert conv_rows == ed + 2 * N
    assert shapes["w_o"] == (d, ed)


def test_init_deterministic_under_seed():
    cfg = MambaConfig(d=4, n_state=4)
    a = model.init_params(cfg, np.random.default_rng(5))
    b = model.init_params(cfg, np.random.default_rng(5))
    for name, arr in a.as_dict().items():
        assert np.array_equal(arr, getattr(b, name))


def test_init_statistics():
    cfg = MambaConfig(d=100, n_state=50)
    params = model.init_params(cfg, np.random.default_rng(1))
    assert float(params.a) == 0.5
    assert np.logaddexp(0.0, float(params.delta_bias)) == pytest.approx(1.0, abs=1e-15)
    shapes = model.param_shapes(cfg)
    for name, arr in params.as_dict().items():
        if name in ("a", "delta_bias"):
            continue
        expected = 1.0 / np.sqrt(shapes[name][-1])
        tol = 3.0 * expected / np.sqrt(arr.size)  # ~3 sigma for the sample std
        assert abs(arr.std() - expected) < max(tol, 0.05 * expected), name


# -- selectivity --------------------------------------------------------------

def test_selectivity_hand_computed():
    params, cfg = tiny_params(), tiny_cfg()
    cfg.use_relu = True

    # straight-line recomputation with explicit numbers
    d1 = np.logaddexp(0, 0.3 * 1.0 - 0.2 * 0.0 + 0.1)  # token 0
    a1 = np.exp(-0.7 * d1)
    a_t, xt, bt, ct = model.selectivity(params, cfg, [0])
    assert a_t == pytest.approx(a1, abs=1e-12)
    np.testing.assert_allclose(xt, np.array([1.0, 1.5]) * d1, atol=1e-12)
    np.testing.assert_allclose(bt, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(ct, [1.0, 0.0], atol=1e-12)

    d2 = np.logaddexp(0, -0.2 + 0.1)  # token 1
    a_t, xt, bt, ct = model.selectivity(params, cfg, [0, 1])
    assert a_t == pytest.approx(np.exp(-0.7 * d2), abs=1e-12)
    # conv_x dim 1 at t=2: -2*3 + 0.5*4 = -4, ReLU clips it
    np.testing.assert_allclose(xt, np.array([2.5, 0.0]) * d2, atol=1e-12)
    np.testing.assert_allclose(bt, [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(ct, [2.0, 2.0], atol=1e-12)


def test_zero_decay_rate_pins_a_at_one():
    params, cfg = tiny_params(), tiny_cfg()
    params.a = np.asarray(0.0)
    for window in ([0], [1], [0, 1], [1, 1]):
        a_t, *_ = model.selectivity(params, cfg, window)
        assert a_t == 1.0


def test_zero_delta_weight_makes_delta_constant():
    params, cfg = tiny_params(), tiny_cfg()
    params.w_delta = np.zeros((1, 2))
    expected = np.exp(-0.7 * np.logaddexp(0, 0.1))
    for window in ([0], [1]):
        a_t, *_ = model.selectivity(params, cfg, window)
        assert a_t == pytest.approx(expected, abs=1e-15)


# -- forward ------------------------------------------------------------------

def test_first_step_state_is_rank_one():
    params, cfg = tiny_params(), tiny_cfg()
    state = model.initial_state(cfg)
    new, _, extra = model.forward_step(params, cfg, state, 1, want_internals=True)
    np.testing.assert_array_equal(new.H, np.outer(extra["x_tilde"], extra["b"]))


def test_softmax_head_outputs_distribution():
    cfg = MambaConfig(d=4, n_state=4)
    params = model.init_params(cfg, np.random.default_rng(2))
    seq = np.random.default_rng(3).integers(0, 2, size=30)
    trace = model.forward_sequence(params, cfg, seq)
    assert np.all(trace.probs > 0)
    np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(trace.a > 0) and np.all(trace.a < 1)


def test_fold_equals_batched_evaluation():
    rng = np.random.default_rng(4)
    tokens = rng.integers(0, 2, size=(3, 24))
    for variant, head in (("full", "softmax"), ("minimal", "l1norm")):
        cfg = MambaConfig(d=4, n_state=3, e=2, w=3, variant=variant)
        params = model.init_params(cfg, np.random.default_rng(6))
        batched = model.batched_trace(params, cfg, tokens)
        for b in range(3):
            trace = model.forward_sequence(params, cfg, tokens[b], head_strict=False)
            np.testing.assert_allclose(trace.probs, batched[b], rtol=0, atol=1e-12)


def test_causality_under_suffix_perturbation():
    cfg = MambaConfig(d=4, n_state=4, w=3)
    params = model.init_params(cfg, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    tokens = rng.integers(0, 2, size=(1, 20))
    changed = tokens.copy()
    changed[0, 12:] = 1 - changed[0, 12:]
    a = model.batched_trace(params, cfg, tokens)[0]
    b = model.batched_trace(params, cfg, changed)[0]
    np.testing.assert_array_equal(a[:12], b[:12])
    assert np.abs(a[12:] - b[12:]).max() > 0


def test_window_locality_of_selectivity():
    cfg = MambaConfig(d=4, n_state=4, w=2)  # w_c defaults to w
    params = model.init_params(cfg, np.random.default_rng(9))
    base = [0, 1, 0, 1, 1]
    bent = [1, 0, 1, 1, 1]  # same final w tokens, different earlier history
    tr_a = model.forward_sequence(params, cfg, base, record_internals=True)
    tr_b = model.forward_sequence(params, cfg, bent, record_internals=True)
    for key in ("x_tilde", "b", "c", "a"):
        np.testing.assert_array_equal(tr_a.internals[key][-1],
                                      tr_b.internals[key][-1])
    # ... but states (and thus predictions) may differ
    assert np.abs(tr_a.probs[-1] - tr_b.probs[-1]).max() > 0


def test_conv_c_window_can_be_shorter():
    cfg = MambaConfig(d=4, n_state=4, w=2, w_c=1)
    params = model.init_params(cfg, np.random.default_rng(10))
    # c_t must ignore everything but the current token
    tr_a = model.forward_sequence(params, cfg, [0, 1, 1], record_internals=True)
    tr_b = model.forward_sequence(params, cfg, [1, 0, 1], record_internals=True)
    np.testing.assert_array_equal(tr_a.internals["c"][-1], tr_b.internals["c"][-1])
    assert np.abs(tr_a.internals["b"][-1] - tr_b.internals["b"][-1]).max() > 0


def test_no_conv_ablation_reads_only_current_token():
    cfg = MambaConfig(d=4, n_state=4, w=3, use_conv=False)
    assert cfg.conv_width == 1
    params = model.init_params(cfg, np.random.default_rng(11))
    tr_a = model.forward_sequence(params, cfg, [0, 0, 0, 1], record_internals=True)
    tr_b = model.forward_sequence(params, cfg, [1, 1, 1, 1], record_internals=True)
    for key in ("x_tilde", "b", "c", "a"):
        np.testing.assert_array_equal(tr_a.internals[key][-1],
                                      tr_b.internals[key][-1])


def test_degenerate_l1_logits_raise_in_strict_mode():
    from mambalab import construction as cons
    cfg, params = cons.build_exact_params(1.0, 0.01)
    params.lm_head = -np.eye(2)  # all logits now negative
    with pytest.raises(model.DegenerateLogitError):
        model.forward_sequence(params, cfg, [0, 1, 0])
    trace = model.forward_sequence(params, cfg, [0, 1, 0], head_strict=False)
    np.testing.assert_allclose(trace.probs, 0.5, rtol=0, atol=1e-12)


def test_forward_step_rejects_foreign_token():
    params, cfg = tiny_params(), tiny_cfg()
    with pytest.raises(ValueError):
        model.forward_step(params, cfg, model.initial_state(cfg), 2)


def test_negative_decay_rate_rejected_at_step():
    params, cfg = tiny_params(), tiny_cfg()
    params.a = np.asarray(-0.5)
    with pytest.raises(ValueError, match="a_t"):
        model.forward_step(params, cfg, model.initial_state(cfg), 0)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = MambaConfig(d=5, n_state=3, e=2, w=3, alphabet_size=3)
    params = model.init_params(cfg, np.random.default_rng(12))
    state = {"iteration": 17, "m": {"embed": [0.25, -1.5]}}
    path = tmp_path / "ckpt.json"
    model.save_checkpoint(path, cfg, params, train_state=state)
    cfg2, params2, state2 = model.load_checkpoint(path)
    assert cfg2 == cfg and state2 == state
    for name, arr in params.as_dict().items():
        assert np.array_equal(arr, getattr(params2, name)), name
