import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmt.charlm import (
    BOS,
    EOS,
    CharLM,
    CharLMConfig,
    CharVocab,
    GRUParams,
    charlm_train,
    filter_corpus,
    filter_report,
    gru_logits,
    perplexities,
    perplexity,
    step_distributions,
)
from mmt.errors import ConfigError, ContractError, InputError
from mmt.rng import SplitMix64
from mmt.tensor import grad_check, weighted_nll

CORPUS = ["the cat sat on the mat", "a dog ran to the park", "the sun is hot", "we eat red apples"] * 3


def random_lm(seed=0, chars="abc", hidden=5, embed=4, bidirectional=False, out_std=0.5):
    """Untrained model with a nonzero output projection."""
    vocab = CharVocab(list(chars))
    cfg = CharLMConfig(hidden=hidden, embed=embed, bidirectional=bidirectional)
    rng = SplitMix64(seed)

    def part(tag):
        p = GRUParams.init(len(vocab), embed, hidden, rng.spawn(tag))
        p["w_out"].data[...] = rng.spawn(tag + 10).normal((hidden, len(vocab)), out_std)
        p["b_out"].data[...] = rng.spawn(tag + 20).normal((len(vocab),), out_std)
        for g in "zrn":
            p[f"b_{g}"].data[...] = rng.spawn(tag + 30 + ord(g)).normal((hidden,), 0.3)
        return p

    return CharLM(vocab, cfg, part(1), part(2) if bidirectional else None)


def oracle_ppl(p: GRUParams, ids: list[int]) -> float:
    """Per-character perplexity via an explicit per-step GRU loop."""
    w = {k: t.data for k, t in p.tensors.items()}
    sig = lambda x: 1 / (1 + np.exp(-x))
    h = np.zeros(w["u_z"].shape[0])
    nll = 0.0
    for x_id, y_id in zip([BOS] + ids, ids + [EOS]):
        x = w["embedding"][x_id]
        z = sig(x @ w["w_z"] + h @ w["u_z"] + w["b_z"])
        r = sig(x @ w["w_r"] + h @ w["u_r"] + w["b_r"])
        n = np.tanh(x @ w["w_n"] + (r * h) @ w["u_n"] + w["b_n"])
        h = (1 - z) * n + z * h
        logits = h @ w["w_out"] + w["b_out"]
        logp = logits - math.log(np.exp(logits).sum())
        nll -= logp[y_id]
    return math.exp(nll / (len(ids) + 1))


def test_hand_example_matches_loop_oracle():
    lm = random_lm(3)
    ids = lm.vocab.encode("abc")
    assert perplexity(lm, "abc") == pytest.approx(oracle_ppl(lm.forward, ids), rel=1e-10)


def test_distributions_sum_to_one():
    lm = random_lm(4)
    dist = step_distributions(lm.forward, lm.vocab.encode("cabbage"))
    assert dist.shape == (8, len(lm.vocab))
    np.testing.assert_allclose(dist.sum(axis=-1), 1.0, atol=1e-12)
    assert (dist >= 0).all()


def test_untrained_model_is_uniform():
    vocab = CharVocab(list("abcdef"))
    p = GRUParams.init(len(vocab), 4, 6, SplitMix64(0))
    lm = CharLM(vocab, CharLMConfig(hidden=6, embed=4), p)
    assert perplexity(lm, "face") == pytest.approx(len(vocab), rel=1e-12)


@given(st.text(alphabet="abcxyz ", min_size=1, max_size=20))
def test_perplexity_at_least_one(s):
    assert perplexity(random_lm(5), s) >= 1.0


def test_unknown_chars_and_case():
    lm = random_lm(6)
    assert lm.vocab.encode("AbQ") == [4, 5, 3]
    assert perplexity(lm, "ABC") == perplexity(lm, "abc")


def test_empty_sentence_and_mode_errors():
    lm = random_lm(7)
    with pytest.raises(InputError):
        perplexities(lm, ["ok", ""])
    with pytest.raises(InputError):
        perplexities(lm, ["ab"], mode="sideways")
    with pytest.raises(ContractError):
        perplexities(lm, ["ab"], mode="bidirectional")


def test_bidirectional_is_geometric_mean():
    lm = random_lm(8, bidirectional=True)
    s = "abcab"
    fwd = perplexity(lm, s, "forward")
    ids = lm.vocab.encode(s)
    bwd = oracle_ppl(lm.backward, ids[::-1])
    assert perplexity(lm, s) == pytest.approx(math.sqrt(fwd * bwd), rel=1e-10)


def test_batch_order_invariance():
    lm = random_lm(9)
    sents = ["a", "abcabc", "cc", "bacab", "abc" * 5]
    base = perplexities(lm, sents, batch_size=64)
    perm = [3, 0, 4, 2, 1]
    shuffled = perplexities(lm, [sents[i] for i in perm], batch_size=2, jobs=2)
    np.testing.assert_allclose(shuffled, base[perm], rtol=1e-12)
    for s, v in zip(sents, base):
        assert perplexity(lm, s) == pytest.approx(v, rel=1e-12)


def test_gru_gradients():
    lm = random_lm(10, hidden=3, embed=2)
    inputs = np.array([[BOS, 4, 5, 6, 4, 5]])
    targets = np.array([[4, 5, 6, 4, 5, EOS]])
    weights = np.full(targets.shape, 1 / 6)
    report = grad_check(lambda _: weighted_nll(gru_logits(lm.forward, inputs), targets, weights),
                        lm.forward.tensors)
    assert report.passed, str(report)


def test_training_reduces_loss_and_is_deterministic():
    cfg = CharLMConfig(hidden=16, embed=8, steps=200, batch_size=8, lr=1e-2)
    losses = []
    a = charlm_train(CORPUS, cfg, seed=2, losses=losses)
    b = charlm_train(CORPUS, cfg, seed=2)
    assert losses[-1] < losses[0]
    for k in a.forward.tensors:
        assert np.array_equal(a.forward[k].data, b.forward[k].data)


def test_degenerate_corpus_is_nearly_certain():
    cfg = CharLMConfig(hidden=8, embed=4, steps=200, batch_size=4, lr=2e-2)
    lm = charlm_train(["aaaa"] * 4, cfg, seed=1)
    assert perplexity(lm, "aaaa") < 1.05


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        charlm_train([])
    with pytest.raises(ConfigError):
        charlm_train(["  ", ""])
    with pytest.raises(ConfigError):
        CharLMConfig(hidden=0)


def test_save_load_round_trip(tmp_path):
    lm = random_lm(11, bidirectional=True)
    lm.save(tmp_path / "lm.npz")
    again = CharLM.load(tmp_path / "lm.npz")
    assert again.vocab.itos == lm.vocab.itos and again.config == lm.config
    sents = ["abc", "cab", "xa"]
    np.testing.assert_array_equal(perplexities(again, sents), perplexities(lm, sents))
    with pytest.raises(InputError):
        CharLM.load(tmp_path / "missing.npz")


SENTS = ["abc", "aaaa", "cba", "bbbbbbbb", "acacac", "b", "ccab"]


@settings(max_examples=30)
@given(st.floats(1.0, 20.0), st.floats(1.0, 20.0))
def test_threshold_monotone(t1, t2):
    lm = random_lm(12)
    lo, hi = sorted((t1, t2))
    kept_lo, _ = filter_corpus(lm, SENTS, lo)
    kept_hi, decisions = filter_corpus(lm, SENTS, hi)
    assert set(kept_lo) <= set(kept_hi)
    assert kept_hi == [s for s, d in zip(SENTS, decisions) if d.perplexity <= hi]


def test_threshold_extremes():
    lm = random_lm(13)
    assert filter_corpus(lm, SENTS, math.inf)[0] == SENTS
    assert filter_corpus(lm, SENTS, 1.0)[0] == []
    with pytest.raises(ContractError):
        filter_corpus(lm, SENTS, 0.5)


def test_report_format():
    lm = random_lm(14)
    _, decisions = filter_corpus(lm, ["abc", "cab"], 3.0)
    lines = filter_report(decisions).splitlines()
    assert lines[0] == "sentence_index\tperplexity\tkept"
    assert len(lines) == 3
    idx, ppl, kept = lines[1].split("\t")
    assert idx == "0" and kept in ("0", "1") and float(ppl) == pytest.approx(decisions[0].perplexity, abs=1e-6)
