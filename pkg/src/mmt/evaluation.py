"""Decoding, corpus BLEU and the fake-image (adversarial) evaluation."""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import (
    SENSES,
    Example,
    FeatureFile,
    SubwordVocab,
    ambiguous_accuracy,
    encode_examples,
    group_tokenize,
    normalize,
)
from .errors import ContractError, InputError
from .model import BOS, EOS, EncodedExample, ModelParams, decoder_forward, encoder_forward, output_logits, pad_batch
from .rng import SplitMix64
from .tensor import Tensor, no_tape

MAX_ORDER = 4


# ---------------------------------------------------------------- decoding

def _check_inputs(params: ModelParams, srcs, grids):
    if any(len(s) == 0 for s in srcs):
        raise ContractError("empty source sequence")
    if params.config.multimodal and (grids is None or any(g is None for g in grids)):
        raise InputError("multimodal model needs an image for every source")


def _step_logprobs(params, enc, src_valid, prefix, grid):
    states = decoder_forward(params, prefix, enc, src_valid, grid)
    logits = output_logits(params, states).data[:, -1, :]
    z = logits - logits.max(axis=-1, keepdims=True)
    return logits, z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode_batch(params: ModelParams, srcs: list, grids: list | None = None, max_len: int = 32) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens, for a batch.

    Images are used only by multimodal models.  Returned sequences exclude BOS
    and include the EOS when one was produced.  Ties go to the lowest id.
    """
    cfg = params.config
    _check_inputs(params, srcs, grids)
    max_len = max(1, min(int(max_len), cfg.max_len))
    with no_tape():
        src, valid = pad_batch([np.asarray(s, dtype=np.int64) for s in srcs])
        enc = encoder_forward(params, src, valid)
        grid = np.stack(grids) if cfg.multimodal else None
        n = len(srcs)
        prefix = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        out = [[] for _ in range(n)]
        for _ in range(max_len):
            logits, _ = _step_logprobs(params, enc, valid, prefix, grid)
            nxt = logits.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                out[i].append(int(nxt[i]))
                if nxt[i] == EOS:
                    done[i] = True
            if done.all():
                break
            prefix = np.concatenate([prefix, np.where(done, EOS, nxt)[:, None]], axis=1)
    return out


def greedy_decode(params: ModelParams, src, img=None, max_len: int = 32) -> list[int]:
    """Single-sequence greedy decoding; ``img`` is an image grid array or None."""
    grids = None if img is None else [np.asarray(getattr(img, "grid", img))]
    return greedy_decode_batch(params, [src], grids, max_len)[0]


def sequence_logprob(params: ModelParams, src, tokens, img=None) -> float:
    """Sum of log-probabilities of ``tokens`` (teacher-forced from BOS)."""
    grid = None if img is None else np.asarray(getattr(img, "grid", img))[None]
    if not params.config.multimodal:
        grid = None
    with no_tape():
        src = np.asarray(src, dtype=np.int64)[None]
        enc = encoder_forward(params, src)
        prefix = np.array([[BOS] + list(tokens[:-1])], dtype=np.int64)
        states = decoder_forward(params, prefix, enc, None, grid)
        logits = output_logits(params, states).data[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(len(tokens)), tokens].sum())


def normalized_score(logprob: float, length: int) -> float:
    return logprob / max(length, 1)


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float

    @property
    def score(self) -> float:
        return normalized_score(self.logprob, len(self.tokens))


def beam_decode(params: ModelParams, src, img=None, beam: int = 4, max_len: int = 32,
                return_hypothesis: bool = False):
    """Beam search ranked by length-normalised log-probability.

    Expansion keeps the ``beam`` best candidates by cumulative log-probability
    (ties: lower token id, then earlier hypothesis).  A candidate ending in EOS
    is set aside as finished; search stops when no live hypotheses remain or
    ``max_len`` tokens were produced.  ``beam=1`` reproduces greedy decoding.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    cfg = params.config
    grid = None if img is None else np.asarray(getattr(img, "grid", img))
    _check_inputs(params, [src], None if grid is None else [grid])
    max_len = max(1, min(int(max_len), cfg.max_len))
    with no_tape():
        src_arr = np.asarray(src, dtype=np.int64)[None]
        enc1 = encoder_forward(params, src_arr)
        alive = [Hypothesis([], 0.0)]
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            k = len(alive)
            prefix = np.array([[BOS] + h.tokens for h in alive], dtype=np.int64)
            enc = enc1 if k == 1 else Tensor(np.repeat(enc1.data, k, axis=0))
            g = None if not cfg.multimodal else np.repeat(grid[None], k, axis=0)
            _, logp = _step_logprobs(params, enc, None, prefix, g)
            cands = []
            for hi, h in enumerate(alive):
                top = np.argsort(-logp[hi], kind="stable")[:beam]
                for tok in top:
                    cands.append((h.logprob + float(logp[hi, tok]), int(tok), hi))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            parents, alive = alive, []
            for total, tok, hi in cands[:beam]:
                hyp = Hypothesis(parents[hi].tokens + [tok], total)
                (finished if tok == EOS else alive).append(hyp)
            if not alive:
                break
        pool = finished + alive
        best = max(pool, key=lambda h: h.score)
    return best if return_hypothesis else best.tokens


def translate(params: ModelParams, vocab: SubwordVocab, examples: list[EncodedExample], max_len: int = 32,
              batch_size: int = 64, beam: int = 1, jobs: int = 1) -> list[str]:
    """Decode examples to text, in input order."""
    chunks = [examples[i : i + batch_size] for i in range(0, len(examples), batch_size)]

    def run(chunk):
        grids = [e.grid for e in chunk] if params.config.multimodal else None
        if beam == 1:
            ids = greedy_decode_batch(params, [e.src for e in chunk], grids, max_len)
        else:
            ids = [beam_decode(params, e.src, e.grid, beam, max_len) for e in chunk]
        return [vocab.decode(x) for x in ids]

    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return [s for r in results for s in r]


# ---------------------------------------------------------------- BLEU

def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    cand_len: int = 0
    ref_len: int = 0

    @classmethod
    def from_tokens(cls, cand: list[str], ref: list[str]) -> "BleuStats":
        s = cls(cand_len=len(cand), ref_len=len(ref))
        for n in range(1, MAX_ORDER + 1):
            c, r = ngram_counts(cand, n), ngram_counts(ref, n)
            s.matches[n - 1] = sum(min(k, r[g]) for g, k in c.items())
            s.totals[n - 1] = sum(c.values())
        return s

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            [a + b for a, b in zip(self.matches, other.matches)],
            [a + b for a, b in zip(self.totals, other.totals)],
            self.cand_len + other.cand_len,
            self.ref_len + other.ref_len,
        )

    def score(self, smooth: bool = False) -> float:
        """BLEU in [0, 100] from accumulated counts.

        Orders for which the candidate side has no n-grams at all are left
        out of the geometric mean (so a corpus of very short sentences can
        still score 100 against itself).  Without smoothing any zero
        precision gives 0; with ``smooth`` every order uses (m+1)/(t+1).
        """
        if self.cand_len == 0:
            return 0.0
        logs = []
        for m, t in zip(self.matches, self.totals):
            if t == 0:
                continue
            if smooth:
                logs.append(math.log((m + 1) / (t + 1)))
            elif m == 0:
                return 0.0
            else:
                logs.append(math.log(m / t))
        bp = 1.0 if self.cand_len > self.ref_len else math.exp(1.0 - self.ref_len / self.cand_len)
        return 100.0 * bp * math.exp(sum(logs) / len(logs))


def bleu_tokens(text: str) -> list[str]:
    return group_tokenize(normalize(text))


def corpus_stats(candidates: list[str], references: list[str]) -> BleuStats:
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    total = BleuStats()
    for c, r in zip(candidates, references):
        total = total + BleuStats.from_tokens(bleu_tokens(c), bleu_tokens(r))
    return total


def bleu(candidates: list[str], references: list[str], smooth: bool = False) -> float:
    """Corpus BLEU-4 over group-tokenised, lower-cased text."""
    if not candidates:
        raise ContractError("BLEU of an empty candidate set")
    return corpus_stats(candidates, references).score(smooth)


def sentence_bleu(candidate: str, reference: str) -> float:
    return BleuStats.from_tokens(bleu_tokens(candidate), bleu_tokens(reference)).score(smooth=True)


# ---------------------------------------------------------------- adversarial evaluation

@dataclass
class AdversarialReport:
    metric: str
    metric_true: float
    metric_shuffled: float
    seed: int
    permutation: list[int]

    @property
    def delta(self) -> float:
        return self.metric_true - self.metric_shuffled

    def tsv(self) -> str:
        return (
            f"metric\t{self.metric}\nmetric_true\t{self.metric_true:.6f}\n"
            f"metric_shuffled\t{self.metric_shuffled:.6f}\ndelta\t{self.delta:.6f}\nseed\t{self.seed}"
        )


def score_translations(hyps: list[str], refs: list[str], metric: str) -> float:
    if metric == "accuracy":
        return ambiguous_accuracy(hyps, refs, (SENSES,))
    if metric == "bleu":
        return bleu(hyps, refs)
    raise InputError(f"unknown metric {metric!r}")


def adversarial_eval(params: ModelParams, vocab: SubwordVocab, test: list[Example], features: FeatureFile,
                     seed: int, metric: str = "accuracy", max_len: int = 32, jobs: int = 1) -> AdversarialReport:
    """Score ``test`` with its true images and again with deranged ("fake") images."""
    if len(test) < 2:
        raise ContractError("adversarial evaluation needs at least two examples")
    if any(ex.image_ref is None for ex in test):
        raise InputError("adversarial evaluation needs an image for every example")
    perm = SplitMix64(seed).derangement(len(test))
    fake = [Example(ex.id, ex.source, ex.target, test[perm[i]].image_ref) for i, ex in enumerate(test)]
    refs = [ex.target or "" for ex in test]
    true_hyps = translate(params, vocab, encode_examples(test, vocab, features, params.config.max_len), max_len, jobs=jobs)
    fake_hyps = translate(params, vocab, encode_examples(fake, vocab, features, params.config.max_len), max_len, jobs=jobs)
    return AdversarialReport(
        metric, score_translations(true_hyps, refs, metric), score_translations(fake_hyps, refs, metric), seed, perm
    )
