"""Generator contracts: simplex rows, determinism, degenerate configs."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambalab import markov


def test_kernel_rows_are_distributions():
    rng = np.random.default_rng(0)
    for k in (1, 2, 3):
        kern = markov.sample_kernel(k, 0.7, rng)
        assert kern.probs.shape == (2**k, 2)
        np.testing.assert_allclose(kern.probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(kern.probs >= 0) and np.all(kern.probs <= 1)


def test_kernel_beta_one_rows_are_uniform_on_simplex():
    # Beta(1, 1) is Uniform[0, 1]: the mean of P(1|ctx) over many draws is 1/2
    rng = np.random.default_rng(7)
    vals = np.concatenate([markov.sample_kernel(1, 1.0, rng).probs[:, 1]
                           for _ in range(50_000)])
    assert vals.size == 100_000
    assert abs(vals.mean() - 0.5) < 0.01


def test_kernel_determinism():
    a = markov.sample_kernel(2, 1.5, np.random.default_rng(123))
    b = markov.sample_kernel(2, 1.5, np.random.default_rng(123))
    assert np.array_equal(a.probs, b.probs)


def test_kernel_rejects_bad_parameters():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        markov.sample_kernel(0, 1.0, rng)
    with pytest.raises(ValueError):
        markov.sample_kernel(1, 0.0, rng)


def test_deterministic_kernel_forces_alternation():
    kern = markov.MarkovKernel(order=1, beta=1.0,
                               probs=np.array([[0.0, 1.0], [1.0, 0.0]]))
    # seed 1 draws 0 as the first uniform token
    seq = markov.sample_sequence(kern, 6, np.random.default_rng(1))
    assert seq.tokens.tolist() == [0, 1, 0, 1, 0, 1]


def test_sequence_length_and_alphabet():
    rng = np.random.default_rng(5)
    kern = markov.sample_kernel(2, 1.0, rng)
    seq = markov.sample_sequence(kern, 100, rng)
    assert len(seq) == 100
    assert set(seq.tokens.tolist()) <= {0, 1}
    with pytest.raises(ValueError):
        markov.sample_sequence(kern, 1, rng)


def test_empirical_conditional_frequencies_match_kernel():
    rng = np.random.default_rng(11)
    kern = markov.sample_kernel(1, 1.0, rng)
    seq = markov.sample_sequence(kern, 100_000, rng)
    x = seq.tokens
    for ctx in (0, 1):
        nxt = x[1:][x[:-1] == ctx]
        freq1 = (nxt == 1).mean()
        assert abs(freq1 - kern.probs[ctx, 1]) < 0.01


def test_switching_degenerate_probabilities():
    rng = np.random.default_rng(2)
    none = markov.sample_switching(markov.SwitchingConfig(p_switch=0.0, T=500), rng)
    assert markov.SWITCH_TOKEN not in none.tokens
    rng = np.random.default_rng(2)
    all_s = markov.sample_switching(markov.SwitchingConfig(p_switch=1.0, T=50), rng)
    assert np.all(all_s.tokens == markov.SWITCH_TOKEN)


def test_switching_token_frequency():
    cfg = markov.SwitchingConfig(p_switch=0.01, T=100_000)
    seq = markov.sample_switching(cfg, np.random.default_rng(3))
    freq = (seq.tokens == markov.SWITCH_TOKEN).mean()
    assert abs(freq - 0.01) < 0.002


def test_switching_config_validation():
    with pytest.raises(ValueError):
        markov.SwitchingConfig(p_switch=1.5)


def test_batch_b1_composes_kernel_then_sequence():
    seed = 42
    batch = markov.sample_batch(1, 1.0, 32, 1, np.random.default_rng(seed))
    child = np.random.default_rng(seed).spawn(1)[0]
    kern = markov.sample_kernel(1, 1.0, child)
    seq = markov.sample_sequence(kern, 32, child)
    assert np.array_equal(batch[0].tokens, seq.tokens)
    assert np.array_equal(batch[0].kernel.probs, kern.probs)


def test_batch_elements_have_distinct_kernels():
    batch = markov.sample_batch(1, 1.0, 8, 16, np.random.default_rng(0))
    tables = np.stack([s.kernel.probs for s in batch])
    for i in range(len(batch)):
        for j in range(i + 1, len(batch)):
            assert not np.array_equal(tables[i], tables[j])


def test_batch_reproducible_bit_exactly():
    a = markov.sample_batch(2, 0.5, 64, 8, np.random.default_rng(9))
    b = markov.sample_batch(2, 0.5, 64, 8, np.random.default_rng(9))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.tokens, sb.tokens)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 3))
def test_generated_sequences_stay_in_alphabet(seed, k):
    rng = np.random.default_rng(seed)
    kern = markov.sample_kernel(k, 1.0, rng)
    seq = markov.sample_sequence(kern, 40, rng)
    assert set(seq.tokens.tolist()) <= {0, 1}
    sw = markov.sample_switching(markov.SwitchingConfig(k=k, T=40, p_switch=0.1), rng)
    assert set(sw.tokens.tolist()) <= {0, 1, markov.SWITCH_TOKEN}


def test_sequence_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    seqs = markov.sample_batch(1, 1.0, 20, 3, rng)
    seqs.append(markov.sample_switching(markov.SwitchingConfig(T=20, p_switch=0.3), rng))
    path = tmp_path / "seqs.txt"
    markov.write_sequences(path, seqs)
    back = markov.read_sequences(path)
    assert len(back) == 4
    for orig, rt in zip(seqs, back):
        assert np.array_equal(orig.tokens, rt.tokens)
