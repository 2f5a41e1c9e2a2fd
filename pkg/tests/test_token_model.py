import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltw.errors import ConfigError, FormatError, IngestionError
from ltw.partition import green_mask
from ltw.token_model import (BOS_ID, EOS_ID, UNK_ID, SamplerConfig, TokenModel, apply_bias,
                             banned_tokens, entropy, fit_ngram, perplexity, read_corpus, sample,
                             softmax, tokenize, truncate)


def test_bigram_conditional_hand_count(ab_model):
    a, b = ab_model.encode(["a", "b"])
    assert ab_model.vocab_size == 5
    assert ab_model.vocab[:3] == ["<unk>", "<bos>", "<eos>"]
    probs = np.exp(ab_model.logits([a]))
    assert probs[b] == pytest.approx(3 / 7, abs=1e-15)
    assert ab_model.logits([a])[b] == pytest.approx(math.log(3 / 7), abs=1e-15)


def test_conditionals_sum_to_one_and_positive(small_model):
    rng = np.random.default_rng(0)
    contexts = list(small_model.counts)[:50] + [tuple(rng.integers(0, small_model.vocab_size, 2))]
    for ctx in contexts:
        p = np.exp(small_model.logits(list(ctx)))
        assert abs(p.sum() - 1.0) < 1e-12
        assert (p > 0).all()


def test_unseen_context_is_uniform(ab_model):
    out = ab_model.logits([EOS_ID])
    assert np.all(out == -math.log(5))


def test_large_alpha_approaches_uniform():
    model = fit_ngram("a b a b a a c", order=1, alpha=1e9, vocab_cap=16)
    p = np.exp(model.logits(model.encode(["a"])))
    assert np.allclose(p, 1 / model.vocab_size, atol=1e-8)


def test_short_context_is_bos_padded(small_model):
    first = small_model.encode(["the"])
    assert np.array_equal(small_model.logits(first), small_model.logits([BOS_ID] + first))


def test_empty_corpus_and_small_cap_rejected():
    with pytest.raises(IngestionError):
        fit_ngram(["   ", ""], order=1)
    with pytest.raises(ConfigError):
        fit_ngram("a b", vocab_cap=15)


def test_vocab_cap_maps_rare_tokens_to_unk():
    text = " ".join(f"w{i}" for i in range(20)) + " w0 w0 w1"
    model = fit_ngram(text, order=1, vocab_cap=16)
    assert model.vocab_size == 19
    assert model.encode(["w9"]) == [UNK_ID]
    assert model.encode(["w0"]) == [3]


def test_tokenize_lowercases_and_splits():
    assert tokenize("The  Cat\tsat.\n") == ["the", "cat", "sat."]


def test_read_corpus_skips_blank_lines(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("one doc\n\n  \nsecond doc\n")
    assert read_corpus(p) == ["one doc", "second doc"]


def test_model_round_trip(small_model, tmp_path):
    path = tmp_path / "m.ngram"
    small_model.save(path)
    again = TokenModel.load(path)
    assert again.dumps() == small_model.dumps()
    ctx = small_model.encode(["the", "end"])
    assert np.array_equal(again.logits(ctx), small_model.logits(ctx))


@pytest.mark.parametrize("mutate", [
    lambda s: s.replace("LTW-NGRAM v1", "LTW-NGRAM v2"),
    lambda s: s[: len(s) // 2],
    lambda s: s.replace("order 1", "order x"),
])
def test_malformed_model_files_rejected(ab_model, mutate):
    with pytest.raises(FormatError):
        TokenModel.loads(mutate(ab_model.dumps()))


# -- softmax / entropy / bias ----------------------------------------------------

def test_two_way_softmax():
    assert softmax(np.array([0.0, math.log(3)])) == pytest.approx([0.25, 0.75], abs=1e-15)


def test_entropy_examples():
    assert entropy(np.array([0.25, 0.75])) == pytest.approx(
        -(0.25 * math.log(0.25) + 0.75 * math.log(0.75)), abs=1e-15)
    assert entropy(np.array([0.25, 0.75])) == pytest.approx(0.562335, abs=1e-6)
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)
    assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=40), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalized(values, c):
    x = np.array(values)
    p = softmax(x)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(x + c), p, atol=1e-12)
    assert -1e-12 <= entropy(p) <= math.log(x.size) + 1e-12


def test_equal_logits_uniform():
    assert np.allclose(softmax(np.zeros(7)), 1 / 7)


def test_apply_bias_examples():
    logits = np.linspace(-3, 0, 8)
    mask = green_mask(8, 0.25, 42)
    out = apply_bias(logits, mask, 3.0)
    assert np.allclose(out[mask.bits], logits[mask.bits] + 3.0)
    assert np.array_equal(out[~mask.bits], logits[~mask.bits])
    assert np.allclose(apply_bias(logits, mask, 3.0, 0.5)[mask.bits], logits[mask.bits] + 1.5)
    assert np.array_equal(apply_bias(logits, mask, 0.0), logits)
    assert np.array_equal(apply_bias(logits, mask, 3.0, 0.0), logits)
    with pytest.raises(ConfigError):
        apply_bias(logits, mask, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.floats(0, 1), st.integers(0, 1000))
def test_apply_bias_only_raises_green(delta, m, seed):
    logits = np.random.default_rng(seed).normal(size=20)
    mask = green_mask(20, 0.25, seed)
    out = apply_bias(logits, mask, delta, m)
    assert (out >= logits).all()
    assert np.array_equal(out[~mask.bits], logits[~mask.bits])


# -- sampling ---------------------------------------------------------------------

def test_top_k_one_is_argmax():
    probs = softmax(np.array([0.1, 2.0, 0.3, 1.9]))
    cfg = SamplerConfig(top_k=1, no_repeat_ngram=0)
    rng = np.random.default_rng(0)
    assert {sample(probs, cfg, [], rng) for _ in range(50)} == {1}


def test_sampling_is_deterministic():
    probs = softmax(np.random.default_rng(1).normal(size=30))
    cfg = SamplerConfig()
    a = [sample(probs, cfg, [], np.random.default_rng(5)) for _ in range(3)]
    assert len(set(a)) == 1


def test_no_repeat_bigram_excluded():
    a, b, x = 3, 4, 5
    history = [a, b, x, a]
    assert banned_tokens(history, 2) == {b}
    probs = np.array([0.0, 0.0, 0.0, 0.0, 0.97, 0.03])
    cfg = SamplerConfig(top_k=6, top_p=1.0, no_repeat_ngram=2)
    draws = {sample(probs, cfg, history, np.random.default_rng(i)) for i in range(40)}
    assert b not in draws


def test_no_repeat_fallback_when_everything_banned():
    probs = np.array([0.0, 0.0, 0.0, 1.0])
    cfg = SamplerConfig(top_k=1, top_p=1.0, no_repeat_ngram=2)
    assert sample(probs, cfg, [3, 3], np.random.default_rng(0)) == 3


def test_top_p_truncation():
    probs = np.array([0.5, 0.3, 0.15, 0.05])
    ids, w = truncate(probs, SamplerConfig(top_k=4, top_p=0.8))
    assert ids.tolist() == [0, 1]
    assert w == pytest.approx([0.625, 0.375])


@pytest.mark.parametrize("kw", [dict(top_k=0), dict(top_p=0.0), dict(top_p=1.5),
                                dict(temperature=0.0), dict(no_repeat_ngram=-1)])
def test_sampler_config_validation(kw):
    with pytest.raises(ConfigError):
        SamplerConfig(**kw)


# -- perplexity -------------------------------------------------------------------

def test_uniform_model_perplexity_equals_vocab_size():
    model = TokenModel(1, 1.0, ["<unk>", "<bos>", "<eos>"] + [f"t{i}" for i in range(7)], {})
    assert perplexity(model, [3, 4, 5, 9, 9]) == pytest.approx(10.0, rel=1e-12)


def test_perplexity_matches_hand_computed_nll():
    text = "x y z x y y z x z y"
    model = fit_ngram(text, order=1, alpha=0.5, vocab_cap=16)
    toks = ["<bos>"] + text.split()
    pairs = Counter(zip(toks[:-1], toks[1:]))
    pairs[("y", "<eos>")] += 1
    ctx_tot = Counter()
    for (c, _), n in pairs.items():
        ctx_tot[c] += n
    V = 6
    nll = 0.0
    for prev, nxt in zip(toks[:-1], toks[1:]):
        nll -= math.log((pairs[(prev, nxt)] + 0.5) / (ctx_tot[prev] + 0.5 * V))
    ids = [BOS_ID] + model.encode(text.split())
    assert perplexity(model, ids, start=1) == pytest.approx(math.exp(nll / 10), rel=1e-12)


def test_greedy_text_has_lower_perplexity_than_random(small_model):
    rng = np.random.default_rng(0)
    greedy_cfg = SamplerConfig(top_k=1, no_repeat_ngram=0)
    greedy, random = [], []
    starts = [ctx for ctx in small_model.counts][:50]
    for ctx in starts:
        seq = list(ctx)
        for _ in range(15):
            seq.append(sample(softmax(small_model.logits(seq)), greedy_cfg, seq, rng))
        greedy.append(perplexity(small_model, seq, 2))
        junk = list(ctx) + rng.integers(3, small_model.vocab_size, 15).tolist()
        random.append(perplexity(small_model, junk, 2))
    assert np.mean(greedy) < np.mean(random)


def test_unigram_is_distribution(small_model):
    u = small_model.unigram()
    assert u.sum() == pytest.approx(1.0)
    assert u[BOS_ID] == 0.0
