"""Optimisation: Noam-scheduled Adam, checkpoints, top-k tracking and averaging.

Checkpoint file layout (all integers u32 little-endian)::

    b"MMXF" | version | n_params
    n_params x (name_len | name utf-8 | rank | dims...)
    payload: float32 LE values of every parameter, manifest order
    n_meta x (key_len | key | value_len | value)     preceded by n_meta
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError, NonFiniteError, StructuralError, TrainingDiverged
from .model import EncodedExample, ModelConfig, ModelParams, joint_loss
from .rng import SplitMix64
from .tensor import Tape, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMXF"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- schedule / optimiser

def noam_lr(step: int, d: int, warmup: int, init_lr: float) -> float:
    """init_lr * d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1 or warmup < 1:
        raise ContractError("noam_lr needs step >= 1 and warmup >= 1")
    return init_lr * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    init_lr: float = 0.2


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the arrays of ``params``.

    Parameters absent from ``grads`` are treated as having zero gradient.
    A non-finite gradient aborts before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` (entries replaced, never mutated) to global norm <= max_norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------- checkpoints

@dataclass
class CheckpointArchive:
    manifest: list[tuple[str, tuple[int, ...]]]
    arrays: dict[str, np.ndarray]  # float32
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: ModelParams, **meta) -> "CheckpointArchive":
        manifest = [(k, tuple(t.shape)) for k, t in params.items()]
        arrays = {k: t.data.astype(np.float32) for k, t in params.items()}
        full = {"config": json.dumps(params.config.to_dict(), sort_keys=True)}
        full.update({k: str(v) for k, v in meta.items()})
        return cls(manifest, arrays, full)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def model_config(self) -> ModelConfig:
        if "config" not in self.meta:
            raise InputError("checkpoint carries no model config")
        return ModelConfig(**json.loads(self.meta["config"]))

    def to_params(self, config: ModelConfig | None = None) -> ModelParams:
        config = config or self.model_config()
        params = ModelParams.init(config, seed=0)
        if [k for k, _ in self.manifest] != params.names():
            raise StructuralError("checkpoint parameters do not match the model layout")
        params.load_arrays({k: a.astype(np.float64) for k, a in self.arrays.items()})
        return params

    def to_bytes(self) -> bytes:
        out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(self.manifest))]
        for name, shape in self.manifest:
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        for name, shape in self.manifest:
            out.append(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        out.append(struct.pack("<I", len(self.meta)))
        for k, v in self.meta.items():
            kb, vb = k.encode("utf-8"), v.encode("utf-8")
            out.append(struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CheckpointArchive":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise InputError("not a checkpoint (bad magic)")
        version, n = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        off = 12
        manifest = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4 : off + 4 + ln].decode("utf-8")
            off += 4 + ln
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            manifest.append((name, tuple(shape)))
        if len({k for k, _ in manifest}) != len(manifest):
            raise InputError("checkpoint manifest has duplicate names")
        arrays = {}
        for name, shape in manifest:
            count = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
            off += 4 * count
        (n_meta,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta = {}
        for _ in range(n_meta):
            (lk,) = struct.unpack_from("<I", raw, off)
            key = raw[off + 4 : off + 4 + lk].decode("utf-8")
            off += 4 + lk
            (lv,) = struct.unpack_from("<I", raw, off)
            meta[key] = raw[off + 4 : off + 4 + lv].decode("utf-8")
            off += 4 + lv
        if off != len(raw):
            raise InputError("checkpoint has trailing bytes")
        return cls(manifest, arrays, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CheckpointArchive":
        return cls.from_bytes(Path(path).read_bytes())


def average_checkpoints(archives: list[CheckpointArchive]) -> CheckpointArchive:
    """Parameter-wise arithmetic mean of checkpoints with identical manifests."""
    if not archives:
        raise ContractError("nothing to average")
    ref = archives[0].manifest
    for j, a in enumerate(archives[1:], 1):
        for i in range(max(len(ref), len(a.manifest))):
            left = ref[i] if i < len(ref) else None
            right = a.manifest[i] if i < len(a.manifest) else None
            if left != right:
                raise StructuralError(f"checkpoint {j} differs at manifest entry {i}: {right} vs {left}")
    arrays = {}
    for name, _ in ref:
        acc = np.zeros(archives[0].arrays[name].shape, dtype=np.float64)
        for a in archives:
            acc += a.arrays[name]
        arrays[name] = (acc / len(archives)).astype(np.float32)
    meta = {k: v for k, v in archives[0].meta.items() if k == "config"}
    meta["source_steps"] = ",".join(str(a.step) for a in archives)
    meta["step"] = str(max(a.step for a in archives))
    return CheckpointArchive(list(ref), arrays, meta)


@dataclass
class TopKTracker:
    """Keeps the k best (score, step, key) entries; ties favour the later step."""

    k: int
    entries: list[tuple[float, int, str]] = field(default_factory=list)

    def offer(self, score: float, step: int, key: str) -> tuple[bool, list[str]]:
        """Insert if good enough; returns (admitted, evicted keys)."""
        self.entries.append((float(score), int(step), key))
        self.entries.sort(key=lambda e: (-e[0], -e[1]))
        evicted = [e[2] for e in self.entries[self.k :]]
        self.entries = self.entries[: self.k]
        admitted = key not in evicted
        return admitted, [e for e in evicted if e != key]

    @property
    def keys(self) -> list[str]:
        return [e[2] for e in self.entries]


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    eval_interval: int = 250
    top_k: int = 10
    warmup: int = 4000
    init_lr: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 1
    bucket_factor: int = 8
    max_decode_len: int = 32


@dataclass
class TrainResult:
    params: ModelParams
    report: list[str]
    tracker: TopKTracker
    archives: dict[str, CheckpointArchive]
    averaged: CheckpointArchive | None
    losses: list[tuple[float, float]]

    def report_text(self) -> str:
        return "".join(line + "\n" for line in self.report)


def batches(examples: list, batch_size: int, rng: SplitMix64, bucket_factor: int = 8):
    """Endless stream of batches: shuffle, bucket by source length, shuffle batches."""
    while True:
        order = rng.permutation(len(examples))
        chunk = batch_size * max(1, bucket_factor)
        epoch = []
        for c in range(0, len(order), chunk):
            part = sorted(order[c : c + chunk], key=lambda i: len(examples[i].src))
            epoch.extend(part[b : b + batch_size] for b in range(0, len(part), batch_size))
        rng.shuffle(epoch)
        for idx in epoch:
            yield [examples[i] for i in idx]


def _snapshot(params: ModelParams, step: int, score: float | None = None) -> CheckpointArchive:
    meta = {"step": step}
    if score is not None:
        meta["score"] = repr(float(score))
    return CheckpointArchive.from_params(params, **meta)


def train(
    params: ModelParams,
    train_set: list[EncodedExample],
    config: TrainConfig,
    validate=None,
    out_dir=None,
    trainable: set[str] | None = None,
) -> TrainResult:
    """Optimise ``params`` in place on ``train_set``.

    ``validate(params) -> score`` (higher is better, e.g. greedy BLEU) is
    called every ``eval_interval`` steps and its result offered to the top-k
    tracker.  ``trainable`` restricts which parameters Adam updates (others
    stay frozen).  With ``out_dir`` set, kept checkpoints, ``last.ckpt``,
    ``averaged.ckpt`` and ``report.tsv`` are written there.
    """
    if not train_set:
        raise ContractError("empty training set")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    master = SplitMix64(config.seed)
    data_rng = master.spawn(1)
    sample_rng = master.spawn(2)
    dropout_rng = np.random.Generator(np.random.PCG64(master.spawn(3).next_u64()))
    state = OptimizerState(beta1=config.beta1, beta2=config.beta2, eps=config.eps, init_lr=config.init_lr)
    names = [k for k in params.names() if trainable is None or k in trainable]
    arrays = {k: params[k].data for k in names}
    owner = {id(params[k]): k for k in names}
    tracker = TopKTracker(config.top_k)
    archives: dict[str, CheckpointArchive] = {}
    report: list[str] = []
    losses: list[tuple[float, float]] = []
    stream = batches(train_set, config.batch_size, data_rng, config.bucket_factor)

    step = 0
    while step < config.steps:
        batch = next(stream)
        try:
            with Tape() as tape:
                total, parts = joint_loss(batch, params, dropout_rng, sample_rng)
            leaf_grads = backward(total, tape)
            grads = {owner[id(t)]: g for t, g in leaf_grads.items() if id(t) in owner}
            clip_global_norm(grads, config.clip_norm)
            lr = noam_lr(step + 1, params.config.d, config.warmup, config.init_lr)
            adam_step(arrays, grads, state, lr)
        except ContractError as e:
            if "no trainable objective" in str(e):
                log.warning("skipping batch without objective")
                continue
            raise
        except NonFiniteError as e:
            last_good = _snapshot(params, step)
            if out is not None:
                last_good.save(out / "last_good.ckpt")
            raise TrainingDiverged(f"training diverged at step {step + 1}: {e}", last_good) from e
        step += 1
        lt = parts["translation"] / max(parts["n_translation"], 1)
        li = parts["imagination"] / max(parts["n_imagination"], 1)
        losses.append((lt, li))
        val = "-"
        if validate is not None and config.eval_interval > 0 and (step % config.eval_interval == 0 or step == config.steps):
            score = float(validate(params))
            val = f"{score:.4f}"
            key = f"ckpt-{step:06d}"
            admitted, evicted = tracker.offer(score, step, key)
            if admitted:
                archives[key] = _snapshot(params, step, score)
                if out is not None:
                    archives[key].save(out / f"{key}.ckpt")
            for k in evicted:
                archives.pop(k, None)
                if out is not None:
                    (out / f"{k}.ckpt").unlink(missing_ok=True)
            log.info("step %d val %.3f", step, score)
        report.append(f"{step}\t{lr:.6e}\t{lt:.6f}\t{li:.6f}\t{val}")

    averaged = average_checkpoints([archives[k] for k in tracker.keys]) if tracker.entries else None
    if out is not None:
        _snapshot(params, step).save(out / "last.ckpt")
        if averaged is not None:
            averaged.save(out / "averaged.ckpt")
        (out / "report.tsv").write_text("".join(r + "\n" for r in report))
    return TrainResult(params, report, tracker, archives, averaged, losses)
