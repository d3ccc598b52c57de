"""Perplexity filtering of in-domain captions mixed with scrambled text.

Trains a character LM on toy-task captions, scores held-out captions and
character-shuffled copies, and reports how many of each survive a threshold.

    python3 scripts/filter_demo.py --threshold 2.5
"""
import argparse
import time

import numpy as np

from mmt.charlm import CharLMConfig, charlm_train, filter_corpus
from mmt.data import generate_toy_task
from mmt.rng import SplitMix64


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threshold", type=float, default=2.5)
    ap.add_argument("--steps", type=int, default=CharLMConfig.steps)
    ap.add_argument("--bidirectional", action="store_true")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    task = generate_toy_task(1000, 250, args.seed)
    start = time.perf_counter()
    lm = charlm_train([e.target for e in task.train],
                      CharLMConfig(steps=args.steps, bidirectional=args.bidirectional), args.seed)
    held = [e.target for e in task.test]
    rng = SplitMix64(args.seed + 1)
    scrambled = []
    for s in held:
        chars = list(s)
        rng.shuffle(chars)
        scrambled.append("".join(chars))
    _, decisions = filter_corpus(lm, held + scrambled, args.threshold)
    ppl = np.array([d.perplexity for d in decisions])
    kept = np.array([d.kept for d in decisions])
    n = len(held)
    print(f"train_seconds\t{time.perf_counter() - start:.1f}")
    print(f"mean_ppl_in_domain\t{ppl[:n].mean():.3f}\nmean_ppl_scrambled\t{ppl[n:].mean():.3f}")
    print(f"kept_in_domain\t{kept[:n].sum()}/{n}\nkept_scrambled\t{kept[n:].sum()}/{n}")


if __name__ == "__main__":
    main()
