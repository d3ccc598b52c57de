import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmt.data import Example, FeatureFile, learn_subwords
from mmt.errors import ContractError, InputError
from mmt.evaluation import (
    BleuStats,
    adversarial_eval,
    beam_decode,
    bleu,
    bleu_tokens,
    corpus_stats,
    greedy_decode,
    greedy_decode_batch,
    sentence_bleu,
    sequence_logprob,
    normalized_score,
)
from mmt.model import EOS, EncodedExample, ModelConfig, ModelParams
from mmt.training import TrainConfig, train
from oracles import brute_bleu

WORDS = st.lists(st.sampled_from(["the", "a", "cat", "dog", "sat", "on", "mat", ","]), min_size=0, max_size=9)


def test_bleu_identity_and_disjoint():
    refs = ["the cat sat on the mat", "a dog"]
    assert bleu(refs, refs) == 100.0
    assert bleu(["x y z", "q"], refs) == 0.0
    assert bleu(["a"], ["a"]) == 100.0


def test_bleu_clipping_example():
    stats = BleuStats.from_tokens(["the", "the", "the"], ["the", "cat"])
    assert stats.matches[0] == 1 and stats.totals[0] == 3
    assert bleu(["the the the"], ["the cat"]) == pytest.approx(
        brute_bleu([["the", "the", "the"]], [["the", "cat"]]), abs=1e-9)
    assert bleu(["the the the"], ["the cat"], smooth=True) == pytest.approx(
        brute_bleu([["the", "the", "the"]], [["the", "cat"]], smooth=True), abs=1e-9)


def test_bleu_empty_candidate_set():
    with pytest.raises(ContractError):
        bleu([], [])


@given(st.lists(st.tuples(WORDS, WORDS), min_size=1, max_size=6), st.booleans())
def test_bleu_matches_brute_force(pairs, smooth):
    cands = [" ".join(c) for c, _ in pairs]
    refs = [" ".join(r) for _, r in pairs]
    toks = [(bleu_tokens(c), bleu_tokens(r)) for c, r in zip(cands, refs)]
    expected = brute_bleu([c for c, _ in toks], [r for _, r in toks], smooth)
    assert bleu(cands, refs, smooth) == pytest.approx(expected, abs=1e-9)


@given(st.lists(st.tuples(WORDS, WORDS), min_size=2, max_size=6), st.integers(0, 10**6))
def test_bleu_additivity_and_permutation(pairs, seed):
    cands = [" ".join(c) for c, _ in pairs]
    refs = [" ".join(r) for _, r in pairs]
    half = len(pairs) // 2
    summed = corpus_stats(cands[:half], refs[:half]) + corpus_stats(cands[half:], refs[half:])
    assert summed == corpus_stats(cands, refs)
    perm = np.random.default_rng(seed).permutation(len(pairs))
    assert bleu([cands[i] for i in perm], [refs[i] for i in perm]) == bleu(cands, refs)


@given(st.lists(WORDS.filter(bool), min_size=1, max_size=5))
def test_bleu_self_is_hundred(sents):
    texts = [" ".join(s) for s in sents]
    assert bleu(texts, texts) == 100.0


def test_bleu_uses_lowercased_groups():
    assert bleu(["The Cat, sat"], ["the cat, sat"]) == 100.0
    assert sentence_bleu("a b c d", "a b c d") == 100.0


# ---------------------------------------------------------------- decoding

SMALL = dict(n_layers=1, d=16, d_ff=32, h=2, vocab_size=12, max_len=12, image_positions=2, image_dim=3,
             pooled_dim=4, imag_hidden=8, dropout=0.0)


def model(seed=0, **kw):
    return ModelParams.init(ModelConfig(**{**SMALL, **kw}), seed)


def random_src(rng):
    return list(rng.integers(4, 12, size=int(rng.integers(1, 6)))) + [EOS]


def test_greedy_budget_and_textual_ignores_image():
    p = model(1)
    src = [5, 6, EOS]
    assert len(greedy_decode(p, src, max_len=1)) == 1
    img = np.ones((2, 3))
    assert greedy_decode(p, src, img) == greedy_decode(p, src)


def test_multimodal_without_image_is_input_error():
    with pytest.raises(InputError):
        greedy_decode(model(mode="multimodal"), [5, EOS])
    with pytest.raises(ContractError):
        greedy_decode(model(), [])


def test_batch_greedy_equals_single():
    p = model(2, mode="multimodal")
    rng = np.random.default_rng(2)
    srcs = [random_src(rng) for _ in range(6)]
    grids = [rng.normal(size=(2, 3)) for _ in srcs]
    batch = greedy_decode_batch(p, srcs, grids, max_len=8)
    assert batch == [greedy_decode(p, s, g, max_len=8) for s, g in zip(srcs, grids)]


def test_beam_one_equals_greedy():
    rng = np.random.default_rng(3)
    for i in range(20):
        p = model(i)
        src = random_src(rng)
        assert beam_decode(p, src, beam=1, max_len=8) == greedy_decode(p, src, max_len=8)


def test_wider_beam_scores_at_least_greedy():
    rng = np.random.default_rng(4)
    for i in range(8):
        p = model(100 + i)
        src = random_src(rng)
        greedy = greedy_decode(p, src, max_len=6)
        best = beam_decode(p, src, beam=4, max_len=6, return_hypothesis=True)
        greedy_score = normalized_score(sequence_logprob(p, src, greedy), len(greedy))
        assert best.score >= greedy_score - 1e-12
        assert best.logprob == pytest.approx(sequence_logprob(p, src, best.tokens), abs=1e-9)
        assert beam_decode(p, src, beam=4, max_len=6) == best.tokens


def test_overfit_single_pair_is_reproduced():
    p = model(5)
    ex = EncodedExample(np.array([4, 7, 9, EOS]), np.array([10, 5, 6, 8]))
    train(p, [ex], TrainConfig(steps=200, batch_size=1, warmup=20, init_lr=1.0, eval_interval=0))
    assert greedy_decode(p, ex.src) == [10, 5, 6, 8, EOS]
    assert beam_decode(p, ex.src, beam=3) == [10, 5, 6, 8, EOS]


# ---------------------------------------------------------------- adversarial evaluation

def tiny_set(n=6):
    vocab = learn_subwords(["a b c d e f", "u v w x y z"], 30)
    ff = FeatureFile(2, 3, 4)
    rng = np.random.default_rng(0)
    exs = []
    for i in range(n):
        ff.add(f"img{i}", rng.normal(size=(2, 3)), rng.normal(size=4))
        exs.append(Example(str(i), "a b c", "u v w", f"img{i}"))
    return vocab, ff, exs


def test_textual_model_has_zero_delta():
    vocab, ff, exs = tiny_set()
    p = ModelParams.init(ModelConfig(**{**SMALL, "vocab_size": len(vocab)}), 0)
    report = adversarial_eval(p, vocab, exs, ff, seed=3, metric="bleu")
    assert report.delta == 0.0
    assert all(report.permutation[i] != i for i in range(len(exs)))
    assert report.tsv().splitlines()[0] == "metric\tbleu"


def test_adversarial_needs_two_examples():
    vocab, ff, exs = tiny_set(1)
    p = ModelParams.init(ModelConfig(**{**SMALL, "vocab_size": len(vocab)}), 0)
    with pytest.raises(ContractError):
        adversarial_eval(p, vocab, exs, ff, seed=1)
