"""Tokenisation, subword vocabulary, dataset/feature files and the toy task.

File formats
------------
* dataset: JSON lines with keys ``id``, ``source`` and optionally ``target``
  and ``image_ref`` (absent keys are omitted).
* feature file: ``b"MMXI"``, u32 version, u32 count, u32 grid positions,
  u32 grid dim, u32 pooled dim, then per record a u32-length-prefixed UTF-8
  id, the grid floats and the pooled floats (float32 little-endian).
* vocabulary: ``token<TAB>id`` lines, then a ``#MERGES`` line, then one
  ``left<TAB>right`` line per merge in rank order.
"""
from __future__ import annotations

import json
import struct
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, StructuralError
from .model import BOS, EOS, PAD, UNK, EncodedExample
from .rng import SplitMix64

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
END = "</w>"
FEATURE_MAGIC = b"MMXI"
FEATURE_VERSION = 1
VOCAB_VERSION = 1
MERGES_SENTINEL = "#MERGES"


# ---------------------------------------------------------------- tokenizer

def _check_text(text: str) -> None:
    for ch in text:
        if unicodedata.category(ch) == "Cc":
            raise InputError(f"control character {ch!r} in input text")


def group_tokenize(text: str) -> list[str]:
    """Split into maximal alphanumeric / non-alphanumeric runs.

    A run consisting of exactly one space with tokens on both sides is dropped;
    :func:`detokenize` restores it between adjacent alphanumeric tokens.
    """
    _check_text(text)
    if not text:
        return []
    runs = []
    start = 0
    for i in range(1, len(text) + 1):
        if i == len(text) or text[i].isalnum() != text[start].isalnum():
            runs.append(text[start:i])
            start = i
    last = len(runs) - 1
    return [r for i, r in enumerate(runs) if not (r == " " and 0 < i < last)]


def detokenize(tokens: list[str]) -> str:
    out = []
    prev = None
    for tok in tokens:
        if prev is not None and prev[-1].isalnum() and tok[0].isalnum():
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


def normalize(text: str) -> str:
    """Pre-processing applied to all model text: lower-casing only."""
    return text.lower()


# ---------------------------------------------------------------- subwords

@dataclass
class SubwordVocab:
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def _segment(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word) + [END]
        while len(symbols) > 1:
            best = None
            for i in range(len(symbols) - 1):
                r = self._ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            pair = self.merges[best[0]]
            symbols = _merge_symbols(symbols, pair)
        self._cache[word] = symbols
        return symbols

    def encode(self, text: str) -> list[int]:
        """Normalised text -> subword ids (no BOS/EOS)."""
        ids = []
        for tok in group_tokenize(normalize(text)):
            for sym in self._segment(tok):
                ids.append(self.token_to_id.get(sym, UNK))
        return ids

    def decode(self, ids) -> str:
        """Ids -> text; specials are skipped, decoding stops at EOS."""
        tokens, cur = [], []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            sym = self.id_to_token.get(i, SPECIALS[UNK])
            if sym == SPECIALS[UNK]:
                sym = "?"
            if sym.endswith(END):
                cur.append(sym[: -len(END)])
                tokens.append("".join(cur))
                cur = []
            else:
                cur.append(sym)
        if cur:
            tokens.append("".join(cur))
        return detokenize([t for t in tokens if t])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, i in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                f.write(f"{tok}\t{i}\n")
            f.write(MERGES_SENTINEL + "\n")
            for a, b in self.merges:
                f.write(f"{a}\t{b}\n")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        token_to_id, merges = {}, []
        in_merges = False
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if line == MERGES_SENTINEL:
                    in_merges = True
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise InputError(f"{path}:{n}: expected two tab-separated fields")
                if in_merges:
                    merges.append((parts[0], parts[1]))
                else:
                    token_to_id[parts[0]] = int(parts[1])
        if sorted(token_to_id.values()) != list(range(len(token_to_id))):
            raise InputError(f"{path}: ids are not dense")
        return cls(merges, token_to_id)


def _merge_symbols(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out, i = [], 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def learn_subwords(corpus: list[str], target_size: int) -> SubwordVocab:
    """Greedy byte-pair merges over group-tokenised, lower-cased ``corpus``.

    Stops when the vocabulary reaches ``target_size`` or no pair occurs at
    least twice.  Ties on frequency go to the lexicographically smallest pair.
    """
    if not corpus:
        raise ConfigError("cannot learn a vocabulary from an empty corpus")
    words = Counter()
    for line in corpus:
        words.update(group_tokenize(normalize(line)))
    alphabet = sorted({ch for w in words for ch in w} | {END})
    base = len(SPECIALS) + len(alphabet)
    if target_size < base:
        raise ConfigError(f"target_size {target_size} < base alphabet + specials ({base})")
    token_to_id = {t: i for i, t in enumerate(SPECIALS)}
    for sym in alphabet:
        token_to_id[sym] = len(token_to_id)

    segs = {w: list(w) + [END] for w in words}
    merges: list[tuple[str, str]] = []
    while len(token_to_id) < target_size:
        pairs = Counter()
        for w, syms in segs.items():
            c = words[w]
            for i in range(len(syms) - 1):
                pairs[(syms[i], syms[i + 1])] += c
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        for w, syms in segs.items():
            if len(syms) > 1:
                segs[w] = _merge_symbols(syms, pair)
        merged = pair[0] + pair[1]
        if merged not in token_to_id:
            token_to_id[merged] = len(token_to_id)
    return SubwordVocab(merges, token_to_id)


# ---------------------------------------------------------------- datasets

@dataclass
class Example:
    id: str
    source: str
    target: str | None = None
    image_ref: str | None = None

    def __post_init__(self):
        if self.target is None and self.image_ref is None:
            raise InputError(f"example {self.id!r} needs a target or an image_ref")

    def to_json(self) -> str:
        rec = {"id": self.id, "source": self.source}
        if self.target is not None:
            rec["target"] = self.target
        if self.image_ref is not None:
            rec["image_ref"] = self.image_ref
        return json.dumps(rec, ensure_ascii=False, sort_keys=False)


def write_jsonl(examples: list[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")


def read_jsonl(path) -> list[Example]:
    out, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{n}: {e}") from None
            unknown = set(rec) - {"id", "source", "target", "image_ref"}
            if unknown or "id" not in rec or "source" not in rec:
                raise InputError(f"{path}:{n}: bad record keys {sorted(rec)}")
            if rec["id"] in seen:
                raise InputError(f"{path}:{n}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            out.append(Example(rec["id"], rec["source"], rec.get("target"), rec.get("image_ref")))
    return out


def mix_datasets(parts: list[tuple[list, int]], seed: int) -> list:
    """Repeat each part ``factor`` times, then shuffle the union with ``seed``."""
    out = []
    for i, (part, factor) in enumerate(parts):
        if not isinstance(factor, (int, np.integer)) or isinstance(factor, bool) or factor < 1:
            raise ConfigError(f"oversampling factor must be an integer >= 1, got {factor!r}")
        if not part:
            warnings.warn(f"dataset part {i} is empty; skipped", stacklevel=2)
            continue
        out.extend(list(part) * int(factor))
    SplitMix64(seed).shuffle(out)
    return out


# ---------------------------------------------------------------- image features

@dataclass
class FeatureFile:
    positions: int
    grid_dim: int
    pooled_dim: int
    records: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, key: str, grid: np.ndarray, pooled: np.ndarray) -> None:
        # stored at file precision so in-memory and loaded features agree
        grid = np.asarray(grid, dtype=np.float32).astype(np.float64)
        pooled = np.asarray(pooled, dtype=np.float32).astype(np.float64)
        if grid.shape != (self.positions, self.grid_dim) or pooled.shape != (self.pooled_dim,):
            raise StructuralError(f"record {key!r}: grid {grid.shape}, pooled {pooled.shape}")
        self.records[key] = (grid, pooled)

    def __getitem__(self, key: str):
        try:
            return self.records[key]
        except KeyError:
            raise InputError(f"image_ref {key!r} not in feature file") from None

    def __contains__(self, key: str) -> bool:
        return key in self.records

    def __len__(self) -> int:
        return len(self.records)

    def to_bytes(self) -> bytes:
        chunks = [
            FEATURE_MAGIC,
            struct.pack("<5I", FEATURE_VERSION, len(self.records), self.positions, self.grid_dim, self.pooled_dim),
        ]
        for key, (grid, pooled) in self.records.items():
            name = key.encode("utf-8")
            chunks.append(struct.pack("<I", len(name)) + name)
            chunks.append(grid.astype("<f4").tobytes())
            chunks.append(pooled.astype("<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeatureFile":
        if raw[:4] != FEATURE_MAGIC:
            raise InputError("not a feature file (bad magic)")
        version, count, p, c, n = struct.unpack_from("<5I", raw, 4)
        if version != FEATURE_VERSION:
            raise InputError(f"unsupported feature file version {version}")
        ff = cls(p, c, n)
        off = 24
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            key = raw[off : off + ln].decode("utf-8")
            off += ln
            grid = np.frombuffer(raw, "<f4", p * c, off).reshape(p, c)
            off += 4 * p * c
            pooled = np.frombuffer(raw, "<f4", n, off)
            off += 4 * n
            ff.records[key] = (grid.astype(np.float64), pooled.astype(np.float64))
        if off != len(raw):
            raise InputError("feature file has trailing bytes")
        return ff

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureFile":
        return cls.from_bytes(Path(path).read_bytes())


def encode_examples(examples: list[Example], vocab: SubwordVocab, features: FeatureFile | None = None,
                    max_len: int | None = None) -> list[EncodedExample]:
    """Text examples -> id arrays plus resolved image features."""
    out = []
    for ex in examples:
        src = np.array(vocab.encode(ex.source) + [EOS], dtype=np.int64)
        tgt = None if ex.target is None else np.array(vocab.encode(ex.target), dtype=np.int64)
        if max_len is not None:
            src = src[:max_len]
            if tgt is not None:
                tgt = tgt[: max_len - 1]
        grid = pooled = None
        if ex.image_ref is not None:
            if features is None:
                raise InputError(f"example {ex.id!r} references an image but no feature file was given")
            grid, pooled = features[ex.image_ref]
        out.append(EncodedExample(src, tgt, grid, pooled, ex.id))
    return out


# ---------------------------------------------------------------- toy task

# Word-for-word source -> target lexicon.  Every caption contains the
# ambiguous word "bank", whose translation depends only on the image.
TOY_LEXICON = {
    "a": "ein", "the": "der", "near": "bei", "in": "im",
    "young": "jung", "old": "alt", "tall": "gross", "small": "klein", "happy": "froh",
    "man": "mann", "woman": "frau", "dog": "hund", "child": "kind", "girl": "maedchen", "boy": "junge",
    "red": "rot", "blue": "blau", "green": "gruen", "black": "schwarz",
    "coat": "mantel", "shirt": "hemd", "hat": "hut",
    "sits": "sitzt", "stands": "steht", "waits": "wartet", "sleeps": "schlaeft", "plays": "spielt",
}
TOY_SLOTS = {
    "adj": ("young", "old", "tall", "small", "happy"),
    "noun": ("man", "woman", "dog", "child", "girl", "boy"),
    "color": ("red", "blue", "green", "black"),
    "garment": ("coat", "shirt", "hat"),
    "verb": ("sits", "stands", "waits", "sleeps", "plays"),
}
AMBIGUOUS_WORD = "bank"
SENSES = ("ufer", "bankhaus")  # river bank / financial bank


@dataclass
class ToyConfig:
    positions: int = 4
    image_dim: int = 16
    sense_channel: int = 0
    sense_strength: float = 1.0
    content_scale: float = 1.0
    noise: float = 0.3


@dataclass
class ToyTask:
    train: list[Example]
    test: list[Example]
    features: FeatureFile
    config: ToyConfig

    @property
    def sense_pairs(self) -> list[tuple[str, str]]:
        return [SENSES]


def toy_caption(choice: dict[str, str]) -> tuple[str, str]:
    """Source caption and its sense-free target (ending in the ambiguous word)."""
    words = ["a", choice["adj"], choice["noun"], "in", "a", choice["color"], choice["garment"],
             choice["verb"], "near", "the"]
    src = " ".join(words + [AMBIGUOUS_WORD])
    tgt = " ".join(TOY_LEXICON[w] for w in words)
    return src, tgt


def toy_cases():
    """Every (source, sense index, target) the generator can produce."""
    import itertools

    keys = list(TOY_SLOTS)
    for combo in itertools.product(*(TOY_SLOTS[k] for k in keys)):
        src, tgt = toy_caption(dict(zip(keys, combo)))
        for s, sense in enumerate(SENSES):
            yield src, s, f"{tgt} {sense}"


def _prototypes(cfg: ToyConfig) -> dict[str, np.ndarray]:
    # fixed content vectors (independent of the run seed) for every slot word;
    # the sense channel is zeroed so only the sense term sets it
    rng = SplitMix64(0x70C0)
    protos = {}
    for k in TOY_SLOTS:
        for w in TOY_SLOTS[k]:
            v = rng.normal((cfg.image_dim,), cfg.content_scale / np.sqrt(3.0))
            v[cfg.sense_channel] = 0.0
            protos[w] = v
    return protos


def sense_of_features(grid: np.ndarray, cfg: ToyConfig) -> int:
    """The designated feature: sign of the sense channel (0 -> first sense)."""
    return 0 if grid[:, cfg.sense_channel].mean() > 0 else 1


def toy_image(choice: dict[str, str], sense: int, cfg: ToyConfig, rng: SplitMix64, protos=None):
    protos = _prototypes(cfg) if protos is None else protos
    content = protos[choice["noun"]] + protos[choice["adj"]] + protos[choice["garment"]]
    grid = content[None, :] + rng.normal((cfg.positions, cfg.image_dim), cfg.noise)
    # the sense channel carries +/- strength with noise that cannot flip its sign
    mag = cfg.sense_strength * (1.0 + 0.25 * rng.random(cfg.positions))
    grid[:, cfg.sense_channel] = (1.0 if sense == 0 else -1.0) * mag
    pooled = grid.mean(axis=0)
    return grid, pooled


def generate_toy_task(n_train: int, n_test: int, seed: int, config: ToyConfig | None = None) -> ToyTask:
    """Synthetic captions whose ambiguous word is resolved only by the image.

    Senses are balanced within each split (counts differ by at most one) and
    drawn independently of the caption text.
    """
    cfg = config or ToyConfig()
    if n_train < 1 or n_test < 1:
        raise ConfigError("toy task sizes must be >= 1")
    rng = SplitMix64(seed)
    protos = _prototypes(cfg)
    ff = FeatureFile(cfg.positions, cfg.image_dim, cfg.image_dim)
    splits = {}
    for split, n in (("train", n_train), ("test", n_test)):
        senses = [i % 2 for i in range(n)]
        rng.shuffle(senses)
        examples = []
        for i in range(n):
            choice = {k: v[rng.randbelow(len(v))] for k, v in TOY_SLOTS.items()}
            src, tgt = toy_caption(choice)
            key = f"{split}-{i:05d}"
            grid, pooled = toy_image(choice, senses[i], cfg, rng, protos)
            ff.add(key, grid, pooled)
            examples.append(Example(key, src, f"{tgt} {SENSES[senses[i]]}", key))
        splits[split] = examples
    return ToyTask(splits["train"], splits["test"], ff, cfg)


def ambiguous_accuracy(hypotheses: list[str], references: list[str], sense_pairs=(SENSES,)) -> float:
    """Fraction of references containing a sense word whose hypothesis has that
    exact word at the same token position."""
    hits = total = 0
    sense_words = {w for pair in sense_pairs for w in pair}
    for hyp, ref in zip(hypotheses, references):
        ref_toks = group_tokenize(normalize(ref))
        hyp_toks = group_tokenize(normalize(hyp))
        for pos, tok in enumerate(ref_toks):
            if tok in sense_words:
                total += 1
                hits += int(pos < len(hyp_toks) and hyp_toks[pos] == tok)
    return hits / total if total else float("nan")
