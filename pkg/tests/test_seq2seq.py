import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metabt import autodiff as ad
from metabt import seq2seq as s2s
from metabt.autodiff import ContractError

from oracles import all_sentences


def model(seed, V=5, H=4, L=3):
    return s2s.init_params(V, H, L, np.random.default_rng(seed), emb_scale=1.0)


def exact_probs(p, src, L=None):
    L = p.max_len if L is None else L
    sents = list(all_sentences(p.vocab_size, L))
    lp = s2s.sequence_logprobs(p, [(src, t) for t in sents], L).data
    return dict(zip(sents, np.exp(lp)))


# --- structure ------------------------------------------------------------------

def test_enumeration_matches_independent_product():
    assert s2s.enumerate_sentences(5, 3) == sorted(all_sentences(5, 3), key=lambda s: (len(s), s))
    assert len(s2s.enumerate_sentences(4, 3)) == 4


def test_zero_model_is_uniform_over_emittable_tokens():
    p = s2s.zero_params(7, 3, 4)
    lp, mask = s2s.token_logprobs(p, [(s2s.make_sentence([3, 4]), s2s.make_sentence([5, 6, 3]))])
    assert np.allclose(lp.data[mask > 0], -math.log(5), atol=1e-12)
    nll = s2s.batch_nll(p, [(s2s.make_sentence([3]), s2s.make_sentence([4]))]).item()
    assert abs(math.exp(nll) - 5.0) < 1e-9


def test_max_len_forces_eos():
    p = model(0, L=2)
    lp, _ = s2s.token_logprobs(p, [(s2s.make_sentence([3]), s2s.make_sentence([3, 4]))])
    assert lp.data[0, -1] == 0.0


def test_contract_violations():
    p = model(0)
    with pytest.raises(ContractError):
        s2s.batch_nll(p, [((3, 4), (1, 3, 2))])
    with pytest.raises(ContractError):
        s2s.batch_nll(p, [((1, 9, 2), (1, 3, 2))])
    with pytest.raises(ContractError):
        s2s.batch_nll(p, [((1, 3, 3, 3, 3, 2), (1, 3, 2))])
    with pytest.raises(ContractError):
        s2s.batch_nll(p, [])
    with pytest.raises(ContractError):
        s2s.zero_params(3, 2, 2)


# --- probabilities ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_enumerated_probabilities_sum_to_one(seed):
    p = model(seed)
    for src in [s2s.make_sentence([]), s2s.make_sentence([3, 4, 3])]:
        assert abs(sum(exact_probs(p, src).values()) - 1.0) < 1e-9


def test_batched_logprob_matches_one_at_a_time():
    p = model(1, V=8, H=5, L=5)
    rng = np.random.default_rng(0)
    pairs = [(s2s.make_sentence(rng.integers(3, 8, rng.integers(0, 6))),
              s2s.make_sentence(rng.integers(3, 8, rng.integers(0, 6)))) for _ in range(6)]
    batch = s2s.sequence_logprobs(p, pairs).data
    single = [s2s.sequence_logprob(p, x, y)[0].item() for x, y in pairs]
    assert np.allclose(batch, single, atol=1e-12)


def test_batch_nll_is_token_weighted_mean():
    p = model(2, V=6, L=4)
    pairs = [(s2s.make_sentence([3]), s2s.make_sentence([4, 5, 3])), (s2s.make_sentence([4, 4]), s2s.make_sentence([]))]
    total = sum(s2s.sequence_logprob(p, x, y)[0].item() for x, y in pairs)
    tokens = sum(len(y) - 1 for _, y in pairs)
    assert abs(s2s.batch_nll(p, pairs).item() + total / tokens) < 1e-12


def test_model_gradient_matches_finite_differences():
    p = model(3, V=6, H=3, L=3)
    pairs = [(s2s.make_sentence([3, 5]), s2s.make_sentence([4, 4, 5])), (s2s.make_sentence([5]), s2s.make_sentence([3]))]
    err = ad.fd_check(lambda t: s2s.batch_nll(p.with_tensors(t), pairs), dict(p.tensors), 1e-5)
    assert err < 1e-5


# --- decoding -------------------------------------------------------------------

def test_sampler_matches_enumeration():
    p = model(4, V=5, L=2)
    src = s2s.make_sentence([3, 4])
    probs = exact_probs(p, src)
    n = 40_000
    draws = s2s.sample_batch(p, [src] * n, top_k=4, rng=np.random.default_rng(0))
    counts = Counter(draws)
    tv = 0.5 * sum(abs(counts.get(s, 0) / n - q) for s, q in probs.items())
    assert tv < 0.02


def test_sample_logprob_is_model_logprob():
    p = model(5, V=6, L=3)
    srcs = [s2s.make_sentence([3]), s2s.make_sentence([4, 5])] * 3
    xs, lp = s2s.sample_batch(p, srcs, 3, np.random.default_rng(1), return_logprob=True)
    ref = s2s.sequence_logprobs(p, list(zip(srcs, xs))).data
    assert np.allclose(lp, ref, atol=1e-10)


def test_top1_greedy_and_beam1_agree():
    p = model(6, V=7, H=5, L=5)
    rng = np.random.default_rng(2)
    srcs = [s2s.make_sentence(rng.integers(3, 7, rng.integers(0, 6))) for _ in range(10)]
    top1 = s2s.sample_batch(p, srcs, 1, np.random.default_rng(3))
    greedy = s2s.greedy_batch(p, srcs)
    beam1 = [s2s.beam_search(p, s, 1) for s in srcs]
    assert top1 == greedy == beam1
    assert greedy == [s2s.greedy_decode(p, s) for s in srcs]


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_beam_finds_argmax(seed):
    p = model(seed, V=5, L=3)
    src = s2s.make_sentence([3, 4, 3])
    probs = exact_probs(p, src)
    best = max(probs, key=probs.get)
    sent, score = s2s.beam_search(p, src, len(probs), return_score=True)
    assert sent == best
    assert abs(score - math.log(probs[best])) < 1e-10


def test_beam_respects_max_len():
    p = model(7, V=5, L=6)
    for L in (0, 1, 2):
        assert len(s2s.content_of(s2s.beam_search(p, s2s.make_sentence([]), 3, max_len=L))) <= L


def test_decoder_argument_checks():
    p = model(0)
    src = s2s.make_sentence([3])
    with pytest.raises(ContractError):
        s2s.sample_batch(p, [src], 0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        s2s.sample_batch(p, [src], 2, np.random.default_rng(0), temperature=0.0)
    with pytest.raises(ContractError):
        s2s.beam_search(p, src, 0)


def test_sampling_is_seed_deterministic():
    p = model(8, V=9, L=4)
    srcs = [s2s.make_sentence([3, 4])] * 20
    a = s2s.sample_batch(p, srcs, 5, np.random.default_rng(9))
    b = s2s.sample_batch(p, srcs, 5, np.random.default_rng(9))
    assert a == b


# --- noise ----------------------------------------------------------------------

def test_zero_noise_is_identity():
    sent = s2s.make_sentence([3, 4, 5, 6])
    out = s2s.apply_noise(sent, s2s.NoiseConfig(0.0, 0.0, 1), 10, np.random.default_rng(0))
    assert out == sent


def test_full_deletion_empties_sentence():
    out = s2s.apply_noise(s2s.make_sentence([3, 4]), s2s.NoiseConfig(1.0, 0.0, 1), 10, np.random.default_rng(0))
    assert out == s2s.make_sentence([])


def test_noise_config_validation():
    with pytest.raises(ContractError):
        s2s.NoiseConfig(delete=1.5)
    with pytest.raises(ContractError):
        s2s.NoiseConfig(window=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(3, 11), max_size=8, unique=True), st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_shuffle_moves_tokens_less_than_window(toks, seed, window):
    out = s2s.content_of(s2s.apply_noise(s2s.make_sentence(toks), s2s.NoiseConfig(0.0, 0.0, window),
                                         12, np.random.default_rng(seed)))
    assert sorted(out) == sorted(toks)
    assert all(abs(out.index(t) - i) <= window - 1 for i, t in enumerate(toks))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(3, 11), max_size=8), st.integers(0, 2**32 - 1),
       st.floats(0, 1), st.floats(0, 1))
def test_noise_output_is_valid_and_not_longer(toks, seed, d, r):
    out = s2s.apply_noise(s2s.make_sentence(toks), s2s.NoiseConfig(d, r, 3), 12, np.random.default_rng(seed))
    s2s.check_sentence(out, 12)
    assert len(out) <= len(toks) + 2
