"""Command-line entry point: ``python -m mmt <subcommand> ...``.

Exit codes: 0 success, 1 bad input (including unknown flags), 2 violated
internal invariant.  Machine-readable output goes to stdout, logs to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .charlm import CharLM, CharLMConfig, charlm_train, filter_corpus, filter_report
from .config import load_config, serialize_config
from .data import (
    FEATURE_VERSION,
    VOCAB_VERSION,
    FeatureFile,
    SubwordVocab,
    ToyConfig,
    encode_examples,
    generate_toy_task,
    learn_subwords,
    mix_datasets,
    read_jsonl,
    write_jsonl,
)
from .errors import ContractError, DimensionError, InputError, NonFiniteError, TrainingDiverged
from .evaluation import adversarial_eval, bleu, score_translations, sentence_bleu, translate
from .model import EncodedExample, ModelParams, joint_loss
from .rng import SplitMix64
from .tensor import grad_check
from .training import CHECKPOINT_VERSION, CheckpointArchive, average_checkpoints, train

log = logging.getLogger("mmt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_lines(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from None
    return [line for line in text.splitlines() if line.strip()]


def _emit(text: str, path=None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_model(path) -> ModelParams:
    try:
        return CheckpointArchive.load(path).to_params()
    except OSError as e:
        raise InputError(f"cannot read checkpoint {path}: {e}") from None


def _load_features(path):
    return FeatureFile.load(path) if path else None


# ---------------------------------------------------------------- subcommands

def cmd_gen_toy(args) -> None:
    cfg = ToyConfig(noise=args.noise)
    task = generate_toy_task(args.n_train, args.n_test, args.seed, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(task.train, out / "train.jsonl")
    write_jsonl(task.test, out / "test.jsonl")
    task.features.save(out / "features.mmxi")
    print(f"train\t{len(task.train)}\ntest\t{len(task.test)}\nfeatures\t{len(task.features)}")


def _corpus_text(paths: list[str]) -> list[str]:
    lines = []
    for p in paths:
        if p.endswith(".jsonl"):
            for ex in read_jsonl(p):
                lines.append(ex.source)
                if ex.target is not None:
                    lines.append(ex.target)
        else:
            lines.extend(_read_lines(p))
    return lines


def cmd_learn_vocab(args) -> None:
    vocab = learn_subwords(_corpus_text(args.inputs), args.size)
    vocab.save(args.out)
    print(f"vocab_size\t{len(vocab)}")


def cmd_filter(args) -> None:
    config = CharLMConfig(hidden=args.hidden, embed=args.embed, steps=args.lm_steps,
                          bidirectional=args.mode == "bidirectional")
    if args.lm:
        model = CharLM.load(args.lm)
    else:
        if not args.in_domain:
            raise InputError("filter needs --lm or --in-domain")
        model = charlm_train(_read_lines(args.in_domain), config, args.seed)
        if args.save_lm:
            model.save(args.save_lm)
    kept, decisions = filter_corpus(model, _read_lines(args.corpus), args.threshold, args.mode, args.jobs)
    if args.report:
        Path(args.report).write_text(filter_report(decisions), encoding="utf-8")
    _emit("".join(s + "\n" for s in kept), args.out)
    log.info("kept %d of %d sentences", len(kept), len(decisions))


def cmd_mix(args) -> None:
    parts = []
    for part in args.parts:
        path, _, factor = part.rpartition(":")
        if not path:
            raise InputError(f"expected PATH:FACTOR, got {part!r}")
        try:
            parts.append((read_jsonl(path), int(factor)))
        except ValueError:
            raise InputError(f"oversampling factor in {part!r} is not an integer") from None
    mixed = mix_datasets(parts, args.seed)
    _emit("".join(ex.to_json() + "\n" for ex in mixed), args.out)


def cmd_train(args) -> None:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if not (cfg.train_data and cfg.vocab and cfg.out_dir):
        raise InputError("train needs train_data, vocab and out_dir in the config")
    vocab = SubwordVocab.load(cfg.vocab)
    if cfg.vocab_size != len(vocab):
        log.info("vocab_size set to %d from %s", len(vocab), cfg.vocab)
        cfg = cfg.replace(vocab_size=len(vocab))
    features = _load_features(cfg.features)
    train_set = encode_examples(read_jsonl(cfg.train_data), vocab, features, cfg.max_len)
    validate = None
    if cfg.valid_data:
        valid = read_jsonl(cfg.valid_data)
        valid_enc = encode_examples(valid, vocab, features, cfg.max_len)
        refs = [ex.target or "" for ex in valid]

        def validate(params):
            return bleu(translate(params, vocab, valid_enc, cfg.max_decode_len, jobs=args.jobs), refs)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    params = ModelParams.init(cfg.model_config(), cfg.seed)
    result = train(params, train_set, cfg.train_config(), validate, out)
    lt, li = result.losses[-1]
    print(f"steps\t{cfg.steps}\nloss_translation\t{lt:.6f}\nloss_imagination\t{li:.6f}")
    if result.tracker.entries:
        print(f"best_val\t{result.tracker.entries[0][0]:.4f}")


def _decode(args, data) -> list[str]:
    params = _load_model(args.checkpoint)
    vocab = SubwordVocab.load(args.vocab)
    features = _load_features(args.features)
    enc = encode_examples(data, vocab, features, params.config.max_len)
    return translate(params, vocab, enc, args.max_len, beam=args.beam, jobs=args.jobs)


def cmd_translate(args) -> None:
    hyps = _decode(args, read_jsonl(args.input))
    _emit("".join(h + "\n" for h in hyps), args.out)


def cmd_evaluate(args) -> None:
    data = read_jsonl(args.refs)
    refs = [ex.target or "" for ex in data]
    if args.hyps:
        hyps = Path(args.hyps).read_text(encoding="utf-8").split("\n")[: len(refs)]
    elif args.checkpoint and args.vocab:
        hyps = _decode(args, data)
    else:
        raise InputError("evaluate needs --hyps or --checkpoint with --vocab")
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses for {len(refs)} references")
    lines = [f"n\t{len(refs)}", f"bleu\t{bleu(hyps, refs):.4f}"]
    acc = score_translations(hyps, refs, "accuracy")
    if acc == acc:
        lines.append(f"ambiguous_accuracy\t{acc:.4f}")
    print("\n".join(lines))
    if args.report:
        rows = ["id\thypothesis\treference\tsentence_bleu"]
        rows += [f"{ex.id}\t{h}\t{r}\t{sentence_bleu(h, r):.4f}" for ex, h, r in zip(data, hyps, refs)]
        Path(args.report).write_text("\n".join(rows) + "\n", encoding="utf-8")


def cmd_average(args) -> None:
    archives = []
    for p in args.checkpoints:
        try:
            archives.append(CheckpointArchive.load(p))
        except OSError as e:
            raise InputError(f"cannot read checkpoint {p}: {e}") from None
    average_checkpoints(archives).save(args.out)
    print(f"averaged\t{len(archives)}")


def cmd_adversarial(args) -> None:
    params = _load_model(args.checkpoint)
    vocab = SubwordVocab.load(args.vocab)
    features = FeatureFile.load(args.features)
    report = adversarial_eval(params, vocab, read_jsonl(args.input), features, args.seed, args.metric,
                              args.max_len, args.jobs)
    print(report.tsv())


def gradcheck_model(cfg, seed: int = 0, n_examples: int = 3):
    """Gradient check of the joint loss of a tiny random batch under ``cfg``."""
    model_cfg = cfg.model_config()
    params = ModelParams.init(model_cfg, seed)
    rng = SplitMix64(seed + 1)
    batch = []
    for i in range(n_examples):
        src = np.array([4 + rng.randbelow(model_cfg.vocab_size - 4) for _ in range(2 + i)] + [2])
        tgt = np.array([4 + rng.randbelow(model_cfg.vocab_size - 4) for _ in range(3)])
        grid = rng.normal((model_cfg.image_positions, model_cfg.image_dim))
        pooled = rng.normal((model_cfg.pooled_dim,))
        batch.append(EncodedExample(src, tgt, grid, pooled, str(i)))
    partner = {i: (i + 1) % n_examples for i in range(n_examples)}

    def loss(_inputs):
        return joint_loss(batch, params, None, None, partner)[0]

    return grad_check(loss, dict(params.items()))


def cmd_gradcheck(args) -> None:
    cfg = load_config(args.config, args.set).replace(dropout=0.0)
    report = gradcheck_model(cfg, args.seed)
    print(report)
    if not report.passed:
        raise ContractError(f"gradient check failed: max rel. err {report.max_error:.3e}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmt", description="Multimodal transformer translation toolkit")
    p.add_argument("--version", action="version", version=(
        f"mmt {__version__}; checkpoint MMXF v{CHECKPOINT_VERSION}; features MMXI v{FEATURE_VERSION}; "
        f"vocab v{VOCAB_VERSION}"))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-toy", help="generate the synthetic disambiguation task")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--noise", type=float, default=ToyConfig.noise)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("learn-vocab", help="learn a subword vocabulary")
    s.add_argument("inputs", nargs="+", help=".jsonl datasets or plain-text files")
    s.add_argument("--size", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn_vocab)

    s = sub.add_parser("filter", help="perplexity-threshold corpus filtering")
    s.add_argument("corpus", help="plain text, one sentence per line")
    s.add_argument("--in-domain", help="plain-text corpus to train the character LM on")
    s.add_argument("--lm", help="previously saved character LM")
    s.add_argument("--save-lm")
    s.add_argument("--threshold", type=float, default=2.5)
    s.add_argument("--mode", choices=("forward", "bidirectional"), default="forward")
    s.add_argument("--lm-steps", type=int, default=CharLMConfig.steps)
    s.add_argument("--hidden", type=int, default=CharLMConfig.hidden)
    s.add_argument("--embed", type=int, default=CharLMConfig.embed)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--report", help="TSV report path")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("mix", help="oversample and shuffle datasets")
    s.add_argument("parts", nargs="+", metavar="PATH:FACTOR")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train)

    def decoding(s):
        s.add_argument("--checkpoint")
        s.add_argument("--vocab")
        s.add_argument("--features")
        s.add_argument("--beam", type=int, default=1)
        s.add_argument("--max-len", type=int, default=32)
        s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("translate", help="decode a dataset")
    decoding(s)
    s.add_argument("--input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="BLEU and ambiguous-word accuracy")
    decoding(s)
    s.add_argument("--refs", required=True, help="dataset with reference targets")
    s.add_argument("--hyps", help="hypotheses, one per line")
    s.add_argument("--report", help="per-sentence TSV report path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("average", help="average checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_average)

    s = sub.add_parser("adversarial", help="fake-image evaluation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--metric", choices=("accuracy", "bleu"), default="accuracy")
    s.add_argument("--max-len", type=int, default=32)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_adversarial)

    s = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (InputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, DimensionError, NonFiniteError) as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
