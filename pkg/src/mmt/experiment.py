"""End-to-end runs on the synthetic disambiguation task.

One run generates the task, learns a subword vocabulary, trains a model and
reports ambiguous-word accuracy, BLEU, the fake-image evaluation and the
imagination loss on a fixed held-out set before and after training.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SubwordVocab, ToyTask, ambiguous_accuracy, encode_examples, generate_toy_task, learn_subwords
from .evaluation import AdversarialReport, adversarial_eval, bleu, translate
from .model import EncodedExample, ModelConfig, ModelParams, encoder_forward, imagination_loss, imagine, pad_batch
from .tensor import no_tape
from .training import TrainConfig, train

# Desk-scale architecture; the schedule is shortened so a run fits in a few
# hundred steps.
TOY_MODEL = dict(n_layers=2, d=64, h=4, d_ff=128, dropout=0.1)
TOY_TRAIN = dict(steps=300, batch_size=32, warmup=200, init_lr=1.0, eval_interval=0)


@dataclass
class ToyRun:
    mode: str
    imagination: bool
    seed: int
    params: ModelParams
    vocab: SubwordVocab
    task: ToyTask
    accuracy: float
    bleu: float
    hypotheses: list[str]
    adversarial: AdversarialReport | None
    imag_initial: float = float("nan")
    imag_final: float = float("nan")
    seconds: float = 0.0
    losses: list = field(default_factory=list)

    def row(self) -> str:
        adv = "-" if self.adversarial is None else f"{self.adversarial.metric_shuffled:.4f}"
        delta = "-" if self.adversarial is None else f"{self.adversarial.delta:.4f}"
        return (f"{self.mode}\t{int(self.imagination)}\t{self.seed}\t{self.accuracy:.4f}\t{self.bleu:.2f}\t"
                f"{adv}\t{delta}\t{self.imag_initial:.4f}\t{self.imag_final:.4f}\t{self.seconds:.1f}")


ROW_HEADER = "mode\timagination\tseed\taccuracy\tbleu\tfake_accuracy\tdelta\timag_initial\timag_final\tseconds"


def fixed_imagination_loss(params: ModelParams, examples: list[EncodedExample], batch_size: int = 100) -> float:
    """Mean imagination loss with each example's partner fixed to the next one.

    Rows whose prediction is exactly zero (no active hidden unit) have no
    defined cosine distance and are left out.
    """
    total, count = 0.0, 0
    n = len(examples)
    ys = np.stack([e.pooled for e in examples])
    with no_tape():
        for lo in range(0, n, batch_size):
            idx = np.arange(lo, min(n, lo + batch_size))
            src, valid = pad_batch([examples[i].src for i in idx])
            y_hat = imagine(encoder_forward(params, src, valid), params, valid).data
            live = (y_hat * y_hat).sum(axis=-1) > 0
            if live.any():
                loss = imagination_loss(y_hat[live], ys[idx][live], ys[(idx + 1) % n][live], params.config.margin)
                total += float(loss.data.sum())
                count += int(live.sum())
    return total / count if count else float("nan")


def run_toy(mode: str = "multimodal", imagination: bool = False, seed: int = 1, n_train: int = 2000,
            n_test: int = 500, vocab_size: int = 200, adversarial_seed: int | None = None,
            model: dict | None = None, training: dict | None = None, jobs: int = 1) -> ToyRun:
    task = generate_toy_task(n_train, n_test, seed)
    corpus = [e.source for e in task.train] + [e.target for e in task.train]
    vocab = learn_subwords(corpus, vocab_size)
    cfg = ModelConfig(**{**TOY_MODEL, **(model or {}), "vocab_size": len(vocab), "mode": mode,
                         "imagination": imagination, "image_positions": task.config.positions,
                         "image_dim": task.config.image_dim, "pooled_dim": task.config.image_dim})
    params = ModelParams.init(cfg, seed)
    train_set = encode_examples(task.train, vocab, task.features, cfg.max_len)
    test_set = encode_examples(task.test, vocab, task.features, cfg.max_len)
    imag_initial = fixed_imagination_loss(params, test_set) if imagination else float("nan")

    start = time.perf_counter()
    result = train(params, train_set, TrainConfig(**{**TOY_TRAIN, **(training or {}), "seed": seed}))
    seconds = time.perf_counter() - start

    refs = [e.target for e in task.test]
    hyps = translate(params, vocab, test_set, jobs=jobs)
    adv = None
    if adversarial_seed is not None:
        adv = adversarial_eval(params, vocab, task.test, task.features, adversarial_seed, jobs=jobs)
    imag_final = fixed_imagination_loss(params, test_set) if imagination else float("nan")
    return ToyRun(mode, imagination, seed, params, vocab, task, ambiguous_accuracy(hyps, refs), bleu(hyps, refs),
                  hyps, adv, imag_initial, imag_final, seconds, result.losses)
