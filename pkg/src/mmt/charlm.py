"""Character-level recurrent language model and perplexity-threshold filtering.

The recurrent cell is a single-layer GRU.  For input embedding x and previous
state h::

    z  = sigmoid(x W_z + h U_z + b_z)          update gate
    r  = sigmoid(x W_r + h U_r + b_r)          reset gate
    n  = tanh(x W_n + (r * h) U_n + b_n)       candidate state
    h' = (1 - z) * n + z * h

The next-character distribution is softmax(h' W_out + b_out).  The output
projection starts at zero, so an untrained model is exactly uniform over the
character vocabulary.

Sentences are lower-cased and scored as BOS c_1 .. c_n -> c_1 .. c_n EOS.
"""
from __future__ import annotations

import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .rng import SplitMix64
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    embedding,
    matmul,
    mul,
    no_tape,
    sigmoid,
    stack,
    sub,
    tanh,
    weighted_nll,
)
from .training import OptimizerState, adam_step, clip_global_norm

PAD, BOS, EOS, UNK = 0, 1, 2, 3
CHAR_SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
GATES = ("z", "r", "n")


@dataclass
class CharLMConfig:
    hidden: int = 64
    embed: int = 16
    steps: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    clip_norm: float = 1.0
    max_chars: int = 200
    bidirectional: bool = False

    def __post_init__(self):
        if min(self.hidden, self.embed, self.steps, self.batch_size, self.max_chars) < 1:
            raise ConfigError("charlm sizes and step counts must be positive")
        if self.lr <= 0:
            raise ConfigError("charlm learning rate must be positive")


class CharVocab:
    def __init__(self, chars: list[str]):
        self.itos = list(CHAR_SPECIALS) + list(chars)
        self.stoi = {c: i for i, c in enumerate(self.itos)}

    @classmethod
    def from_corpus(cls, sentences: list[str]) -> "CharVocab":
        return cls(sorted({c for s in sentences for c in s.lower()}))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, sentence: str) -> list[int]:
        return [self.stoi.get(c, UNK) for c in sentence.lower()]


@dataclass
class GRUParams:
    """Embedding, gate weights and output projection of one direction."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, vocab_size: int, embed: int, hidden: int, rng: SplitMix64) -> "GRUParams":
        t = {"embedding": rng.normal((vocab_size, embed), 1.0 / math.sqrt(embed))}
        for g in GATES:
            t[f"w_{g}"] = rng.normal((embed, hidden), 1.0 / math.sqrt(embed))
            t[f"u_{g}"] = rng.normal((hidden, hidden), 1.0 / math.sqrt(hidden))
            t[f"b_{g}"] = np.zeros(hidden)
        t["w_out"] = np.zeros((hidden, vocab_size))
        t["b_out"] = np.zeros(vocab_size)
        return cls({k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def hidden(self) -> int:
        return self["u_z"].shape[0]


def gru_step(p: GRUParams, x: Tensor, h: Tensor) -> Tensor:
    z = sigmoid(add(add(matmul(x, p["w_z"]), matmul(h, p["u_z"])), p["b_z"]))
    r = sigmoid(add(add(matmul(x, p["w_r"]), matmul(h, p["u_r"])), p["b_r"]))
    n = tanh(add(add(matmul(x, p["w_n"]), matmul(mul(r, h), p["u_n"])), p["b_n"]))
    return add(n, mul(z, sub(h, n)))


def gru_logits(p: GRUParams, inputs: np.ndarray) -> Tensor:
    """inputs [B, T] ids -> next-character logits [B, T, V]."""
    bsz, steps = inputs.shape
    h = Tensor(np.zeros((bsz, p.hidden)))
    states = []
    for t in range(steps):
        h = gru_step(p, embedding(p["embedding"], inputs[:, t]), h)
        states.append(h)
    return add(matmul(stack(states, axis=1), p["w_out"]), p["b_out"])


def _pack(ids: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays (inputs, targets, mask) for id sequences."""
    width = max(len(s) for s in ids) + 1
    inputs = np.full((len(ids), width), PAD, dtype=np.int64)
    targets = np.full((len(ids), width), PAD, dtype=np.int64)
    mask = np.zeros((len(ids), width))
    for i, s in enumerate(ids):
        inputs[i, : len(s) + 1] = [BOS] + s
        targets[i, : len(s) + 1] = s + [EOS]
        mask[i, : len(s) + 1] = 1.0
    return inputs, targets, mask


@dataclass
class CharLM:
    vocab: CharVocab
    config: CharLMConfig
    forward: GRUParams
    backward: GRUParams | None = None

    def save(self, path) -> None:
        arrays = {f"fwd.{k}": t.data for k, t in self.forward.tensors.items()}
        if self.backward is not None:
            arrays.update({f"bwd.{k}": t.data for k, t in self.backward.tensors.items()})
        header = json.dumps({"chars": self.vocab.itos[len(CHAR_SPECIALS):], "config": asdict(self.config)})
        buf = io.BytesIO()
        np.savez(buf, header=np.frombuffer(header.encode("utf-8"), dtype=np.uint8), **arrays)
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "CharLM":
        try:
            data = np.load(path, allow_pickle=False)
            header = json.loads(bytes(data["header"]).decode("utf-8"))
        except (OSError, ValueError, KeyError) as e:
            raise InputError(f"cannot read character LM {path}: {e}") from None
        config = CharLMConfig(**header["config"])

        def part(prefix):
            names = [k for k in data.files if k.startswith(prefix)]
            if not names:
                return None
            return GRUParams({k[len(prefix):]: Tensor(data[k].astype(np.float64), requires_grad=True) for k in names})

        return cls(CharVocab(header["chars"]), config, part("fwd."), part("bwd."))


def _fit(params: GRUParams, ids: list[list[int]], config: CharLMConfig, rng: SplitMix64) -> list[float]:
    arrays = {k: t.data for k, t in params.tensors.items()}
    owner = {id(t): k for k, t in params.tensors.items()}
    state = OptimizerState()
    losses = []
    for _ in range(config.steps):
        pick = [ids[int(rng.randbelow(len(ids)))] for _ in range(config.batch_size)]
        inputs, targets, mask = _pack(pick)
        with Tape() as tape:
            loss = weighted_nll(gru_logits(params, inputs), targets, mask / mask.sum())
        grads = {owner[id(t)]: g for t, g in backward(loss, tape).items() if id(t) in owner}
        clip_global_norm(grads, config.clip_norm)
        adam_step(arrays, grads, state, config.lr)
        losses.append(loss.item())
    return losses


def charlm_train(corpus: list[str], config: CharLMConfig | None = None, seed: int = 1,
                 losses: list | None = None) -> CharLM:
    """Train on next-character cross-entropy with Adam at a constant rate.

    With ``config.bidirectional`` a second, independent model is trained on
    reversed sentences.  ``losses`` (a list) receives the per-step training
    losses of the forward model.
    """
    config = config or CharLMConfig()
    sentences = [s.lower() for s in corpus if s.strip()]
    if not sentences:
        raise ConfigError("cannot train a character LM on an empty corpus")
    vocab = CharVocab.from_corpus(sentences)
    master = SplitMix64(seed)
    ids = [vocab.encode(s)[: config.max_chars] for s in sentences]
    fwd = GRUParams.init(len(vocab), config.embed, config.hidden, master.spawn(1))
    trace = _fit(fwd, ids, config, master.spawn(2))
    if losses is not None:
        losses.extend(trace)
    bwd = None
    if config.bidirectional:
        bwd = GRUParams.init(len(vocab), config.embed, config.hidden, master.spawn(3))
        _fit(bwd, [s[::-1] for s in ids], config, master.spawn(4))
    return CharLM(vocab, config, fwd, bwd)


def step_distributions(params: GRUParams, ids: list[int]) -> np.ndarray:
    """Per-step next-character distributions [len(ids)+1, V] for one sentence."""
    inputs, _, _ = _pack([ids])
    with no_tape():
        logits = gru_logits(params, inputs).data[0]
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _nll_batch(params: GRUParams, ids: list[list[int]]) -> np.ndarray:
    inputs, targets, mask = _pack(ids)
    with no_tape():
        logits = gru_logits(params, inputs).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -(picked * mask).sum(axis=1) / mask.sum(axis=1)


def perplexities(model: CharLM, sentences: list[str], mode: str | None = None,
                 batch_size: int = 64, jobs: int = 1) -> np.ndarray:
    """Per-character perplexity of each sentence (EOS included).

    ``mode`` is "forward" or "bidirectional" (geometric mean of the forward
    and backward model perplexities); default follows the model.
    """
    mode = mode or ("bidirectional" if model.backward is not None else "forward")
    if mode not in ("forward", "bidirectional"):
        raise InputError(f"unknown perplexity mode {mode!r}")
    if mode == "bidirectional" and model.backward is None:
        raise ContractError("bidirectional scoring needs a backward model")
    ids = []
    for s in sentences:
        if not s.lower():
            raise InputError("cannot score an empty sentence")
        ids.append(model.vocab.encode(s)[: model.config.max_chars])
    chunks = [ids[i : i + batch_size] for i in range(0, len(ids), batch_size)]

    def run(chunk):
        nll = _nll_batch(model.forward, chunk)
        if mode == "bidirectional":
            nll = 0.5 * (nll + _nll_batch(model.backward, [s[::-1] for s in chunk]))
        return nll

    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    if not parts:
        return np.zeros(0)
    return np.exp(np.concatenate(parts))


def perplexity(model: CharLM, sentence: str, mode: str | None = None) -> float:
    return float(perplexities(model, [sentence], mode)[0])


@dataclass
class FilterDecision:
    sentence: str
    perplexity: float
    kept: bool


def filter_corpus(model: CharLM, sentences: list[str], threshold: float, mode: str | None = None,
                  jobs: int = 1) -> tuple[list[str], list[FilterDecision]]:
    """Keep sentences whose perplexity is at most ``threshold``, in input order."""
    if not threshold >= 1.0:
        raise ContractError(f"perplexity threshold {threshold} is below 1")
    ppl = perplexities(model, sentences, mode, jobs=jobs)
    decisions = [FilterDecision(s, float(p), bool(p <= threshold)) for s, p in zip(sentences, ppl)]
    return [d.sentence for d in decisions if d.kept], decisions


def filter_report(decisions: list[FilterDecision]) -> str:
    lines = ["sentence_index\tperplexity\tkept"]
    lines += [f"{i}\t{d.perplexity:.6f}\t{int(d.kept)}" for i, d in enumerate(decisions)]
    return "\n".join(lines) + "\n"
