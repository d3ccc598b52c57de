"""Train textual, multimodal and imagination models on the toy task.

Prints one TSV row per run: ambiguous-word accuracy, BLEU, fake-image
accuracy and its drop, and the held-out imagination loss before and after
training.

    python3 scripts/toy_experiment.py --seeds 1 2 3
"""
import argparse

from mmt.experiment import ROW_HEADER, TOY_TRAIN, run_toy

VARIANTS = {"textual": ("textual", False), "multimodal": ("multimodal", False), "imagination": ("textual", True)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=list(VARIANTS))
    ap.add_argument("--steps", type=int, default=TOY_TRAIN["steps"])
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=500)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    print(ROW_HEADER, flush=True)
    for seed in args.seeds:
        for name in args.variants:
            mode, imag = VARIANTS[name]
            run = run_toy(mode, imag, seed, args.n_train, args.n_test, adversarial_seed=100 + seed,
                          training={"steps": args.steps}, jobs=args.jobs)
            print(run.row(), flush=True)


if __name__ == "__main__":
    main()
