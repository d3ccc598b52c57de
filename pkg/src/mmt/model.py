"""Transformer with an optional doubly-attentive decoder and an imagination head.

Layout (post-norm throughout):

* encoder layer: self-attention -> add&norm -> feed-forward -> add&norm
* decoder layer: masked self-attention -> add&norm -> textual cross-attention
  -> add&norm -> [visual cross-attention over projected image grid -> add&norm]
  -> feed-forward -> add&norm
* logits: final decoder states times the transposed embedding matrix (tied)
* imagination head: W2 relu(W1 sum_j h_j), trained with a cosine-distance
  margin loss against a contrastive image from the same batch

Batched entry points (:func:`encoder_forward`, :func:`decoder_forward`,
:func:`joint_loss`) work on padded [B, T] id arrays; the single-sequence
helpers (:func:`encode`, :func:`decode_step_textual`, ...) wrap them.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import MultiHeadParams, causal_mask, key_mask, multi_head_attention
from .errors import ConfigError, ContractError, InputError, VocabularyError
from .rng import SplitMix64
from .tensor import (
    Tensor,
    add,
    as_tensor,
    div,
    dropout,
    embedding,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    sqrt,
    stack,
    sum_,
    take,
    weighted_nll,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3

MODES = ("textual", "multimodal")
POOLINGS = ("sum", "mean")
SCALE_MODES = ("per_head", "model_dim")


@dataclass
class ModelConfig:
    n_layers: int = 2
    d: int = 64
    d_ff: int = 128
    h: int = 4
    vocab_size: int = 64
    max_len: int = 32
    image_positions: int = 4
    image_dim: int = 16
    pooled_dim: int = 16
    imag_hidden: int = 64
    margin: float = 0.1
    scale_mode: str = "per_head"
    mode: str = "textual"
    imagination: bool = False
    imag_weight: float = 1.0
    pooling: str = "sum"
    dropout: float = 0.1
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d", "d_ff", "h", "vocab_size", "max_len", "image_positions",
                     "image_dim", "pooled_dim", "imag_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.imag_weight < 0:
            raise ConfigError("imag_weight must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"scale_mode must be one of {SCALE_MODES}")

    @property
    def multimodal(self) -> bool:
        return self.mode == "multimodal"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _stream(seed: int, name: str) -> SplitMix64:
    # each parameter draws from its own stream so that models differing only
    # in optional sub-layers share identical values for common parameters
    return SplitMix64((int(seed) * 0x100000001B3) ^ zlib.crc32(name.encode()))


class ModelParams:
    """Named parameter tensors plus the config they were built for.

    The output projection is not a separate entry: logits reuse
    ``self["embedding"]`` transposed.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def mha(self, prefix: str) -> MultiHeadParams:
        return MultiHeadParams(*(self[f"{prefix}.{k}"] for k in ("w_q", "w_k", "w_v", "w_o")))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data, requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if k not in arrays:
                raise ConfigError(f"missing parameter {k!r}")
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def decoder_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("dec.")]

    def imagination_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("imag.")]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        c = config
        shapes: dict[str, tuple[tuple[int, ...], str]] = {}

        def linear(name, fan_in, shape):
            shapes[name] = (shape, f"normal:{1.0 / math.sqrt(fan_in)}")

        def attn(prefix):
            d_h = c.d // c.h
            for k in ("w_q", "w_k", "w_v"):
                linear(f"{prefix}.{k}", c.d, (c.h, c.d, d_h))
            linear(f"{prefix}.w_o", c.d, (c.h, d_h, c.d))

        def ffn(prefix):
            linear(f"{prefix}.w1", c.d, (c.d, c.d_ff))
            shapes[f"{prefix}.b1"] = ((c.d_ff,), "zeros")
            linear(f"{prefix}.w2", c.d_ff, (c.d_ff, c.d))
            shapes[f"{prefix}.b2"] = ((c.d,), "zeros")

        def norm(prefix):
            shapes[f"{prefix}.gain"] = ((c.d,), "ones")
            shapes[f"{prefix}.bias"] = ((c.d,), "zeros")

        shapes["embedding"] = ((c.vocab_size, c.d), f"normal:{c.d ** -0.5}")
        for layer in range(c.n_layers):
            p = f"enc.{layer}"
            attn(f"{p}.self")
            norm(f"{p}.ln1")
            ffn(f"{p}.ff")
            norm(f"{p}.ln2")
        for layer in range(c.n_layers):
            p = f"dec.{layer}"
            attn(f"{p}.self")
            norm(f"{p}.ln_self")
            attn(f"{p}.txt")
            norm(f"{p}.ln_txt")
            if c.multimodal:
                attn(f"{p}.img")
                norm(f"{p}.ln_img")
            ffn(f"{p}.ff")
            norm(f"{p}.ln_ff")
        if c.multimodal:
            linear("image_projection", c.image_dim, (c.image_dim, c.d))
        linear("imag.w1", c.d, (c.imag_hidden, c.d))
        linear("imag.w2", c.imag_hidden, (c.pooled_dim, c.imag_hidden))

        tensors = {}
        for name, (shape, kind) in shapes.items():
            if kind == "zeros":
                data = np.zeros(shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = _stream(seed, name).normal(shape, float(kind.split(":")[1]))
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)


@dataclass
class ImageFeatures:
    grid: np.ndarray  # [image_positions, image_dim]
    pooled: np.ndarray  # [pooled_dim]


@dataclass
class DecoderLayerTrace:
    """Intermediate states of one decoder layer.

    c_self / c_txt are the add&norm outputs of the self- and textual
    cross-attention sub-layers; c_img is the raw visual context (before its
    residual connection); ffn_out is the layer output.
    """

    c_self: Tensor
    c_txt: Tensor
    c_img: Tensor | None
    ffn_out: Tensor
    img_weights: Tensor | None = None
    self_weights: Tensor | None = None


_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positions(n: int, d: int) -> np.ndarray:
    """Sinusoidal position table [n, d]."""
    key = (n, d)
    table = _POSITION_CACHE.get(key)
    if table is None:
        pos = np.arange(n)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _POSITION_CACHE[key] = table
    return table


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id out of range [0, {cfg.vocab_size})")
    if ids.shape[-1] > cfg.max_len:
        raise ContractError(f"sequence length {ids.shape[-1]} exceeds max_len {cfg.max_len}")
    if ids.shape[-1] < 1:
        raise ContractError("empty sequence")


def embed(params: ModelParams, ids: np.ndarray, rng=None) -> Tensor:
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    x = embedding(params["embedding"], ids) * math.sqrt(cfg.d) + positions(ids.shape[-1], cfg.d)
    return dropout(x, cfg.dropout, rng)


def _add_norm(x: Tensor, y: Tensor, params: ModelParams, prefix: str, rng) -> Tensor:
    cfg = params.config
    y = dropout(y, cfg.dropout, rng)
    return layer_norm(add(x, y), params[f"{prefix}.gain"], params[f"{prefix}.bias"], cfg.ln_eps)


def _ffn(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = relu(matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def encoder_forward(params: ModelParams, src: np.ndarray, src_valid: np.ndarray | None = None, rng=None) -> Tensor:
    """[B, S] ids -> [B, S, d] final encoder states."""
    cfg = params.config
    src = np.asarray(src, dtype=np.int64)
    _check_ids(src, cfg)
    x = embed(params, src, rng)
    mask = None if src_valid is None else key_mask(src_valid, src.shape[-1])
    for layer in range(cfg.n_layers):
        p = f"enc.{layer}"
        a = multi_head_attention(x, x, x, params.mha(f"{p}.self"), mask, cfg.scale_mode)
        x = _add_norm(x, a, params, f"{p}.ln1", rng)
        x = _add_norm(x, _ffn(x, params, f"{p}.ff"), params, f"{p}.ln2", rng)
    return x


def project_image(params: ModelParams, grid) -> Tensor:
    """Image grid [..., P, image_dim] -> visual keys/values [..., P, d]."""
    return matmul(as_tensor(grid), params["image_projection"])


def decoder_forward(
    params: ModelParams,
    tgt_in: np.ndarray,
    enc: Tensor,
    src_valid: np.ndarray | None = None,
    grid=None,
    rng=None,
    use_visual: bool | None = None,
    traces: list | None = None,
) -> Tensor:
    """[B, T] decoder inputs -> [B, T, d] final decoder states.

    ``use_visual`` defaults to True for multimodal models; when it is True the
    image ``grid`` [B, P, image_dim] is required.
    """
    cfg = params.config
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    _check_ids(tgt_in, cfg)
    if use_visual is None:
        use_visual = cfg.multimodal
    if use_visual:
        if not cfg.multimodal:
            raise ContractError("visual sub-layer requested on a textual model")
        if grid is None:
            raise InputError("multimodal decoding needs image grid features")
        feats = project_image(params, grid)
    t = tgt_in.shape[-1]
    self_mask = causal_mask(t)
    cross_mask = None if src_valid is None else key_mask(src_valid, t)
    x = embed(params, tgt_in, rng)
    for layer in range(cfg.n_layers):
        p = f"dec.{layer}"
        a, w_self = multi_head_attention(
            x, x, x, params.mha(f"{p}.self"), self_mask, cfg.scale_mode, return_weights=True
        )
        c_self = _add_norm(x, a, params, f"{p}.ln_self", rng)
        a = multi_head_attention(c_self, enc, enc, params.mha(f"{p}.txt"), cross_mask, cfg.scale_mode)
        c_txt = _add_norm(c_self, a, params, f"{p}.ln_txt", rng)
        c_img = w_img = None
        x = c_txt
        if use_visual:
            c_img, w_img = multi_head_attention(
                c_txt, feats, feats, params.mha(f"{p}.img"), None, cfg.scale_mode, return_weights=True
            )
            x = _add_norm(c_txt, c_img, params, f"{p}.ln_img", rng)
        x = _add_norm(x, _ffn(x, params, f"{p}.ff"), params, f"{p}.ln_ff", rng)
        if traces is not None:
            traces.append(DecoderLayerTrace(c_self, c_txt, c_img, x, w_img, w_self))
    return x


def output_logits(params: ModelParams, states: Tensor) -> Tensor:
    return matmul(states, params["embedding"].T)


# ---------------------------------------------------------------- single sequence API

def encode(src_ids, params: ModelParams) -> Tensor:
    """Token ids [S] -> encoder states [S, d]."""
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    return take(encoder_forward(params, src), 0)


def _last_logits(params, prefix_ids, enc_states, grid, use_visual, traces):
    prefix = np.asarray(prefix_ids, dtype=np.int64)
    if prefix.size == 0:
        raise ContractError("decoder prefix must contain at least BOS")
    enc = reshape(as_tensor(enc_states), (1,) + tuple(enc_states.shape))
    g = None if grid is None else np.asarray(grid, dtype=np.float64)[None]
    states = decoder_forward(params, prefix[None, :], enc, None, g, use_visual=use_visual, traces=traces)
    return take(output_logits(params, states), (0, -1))


def decode_step_textual(tgt_prefix_ids, enc_states: Tensor, params: ModelParams) -> Tensor:
    """Next-token logits [V] after ``tgt_prefix_ids`` using only the textual sub-layers."""
    return _last_logits(params, tgt_prefix_ids, enc_states, None, False, None)


def decode_step_multimodal(tgt_prefix_ids, enc_states: Tensor, img: ImageFeatures | None, params: ModelParams):
    """Next-token logits [V] and per-layer traces using the doubly-attentive decoder."""
    if not params.config.multimodal:
        raise ContractError("decode_step_multimodal needs a multimodal model")
    if img is None or img.grid is None:
        raise InputError("multimodal decoding needs image grid features")
    traces: list[DecoderLayerTrace] = []
    logits = _last_logits(params, tgt_prefix_ids, enc_states, img.grid, True, traces)
    # traces from a batch of one: drop the batch axis
    traces = [
        DecoderLayerTrace(
            *(None if v is None else take(v, 0) for v in (tr.c_self, tr.c_txt, tr.c_img, tr.ffn_out, tr.img_weights, tr.self_weights))
        )
        for tr in traces
    ]
    return logits, traces


def imagine(enc_states, params: ModelParams, valid: np.ndarray | None = None) -> Tensor:
    """Predicted pooled image vector from encoder states.

    ``enc_states`` is [S, d] or [B, S, d]; ``valid`` ([B, S]) excludes padding.
    Pools by sum (default) or mean over positions, then W2 relu(W1 pooled).
    """
    h = as_tensor(enc_states)
    single = h.ndim == 2
    if single:
        h = reshape(h, (1,) + h.shape)
    if h.shape[-2] < 1:
        raise ContractError("imagine needs at least one encoder state")
    if valid is not None:
        h = mul(h, np.asarray(valid, dtype=np.float64)[..., None])
    pooled = sum_(h, axis=-2)
    if params.config.pooling == "mean":
        counts = h.shape[-2] if valid is None else np.asarray(valid).sum(axis=-1, keepdims=True)
        pooled = div(pooled, np.asarray(counts, dtype=np.float64))
    hidden = relu(matmul(pooled, params["imag.w1"].T))
    y_hat = matmul(hidden, params["imag.w2"].T)
    return take(y_hat, 0) if single else y_hat


def cosine_distance(a, b) -> Tensor:
    """1 - cos(a, b) along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    na = sum_(mul(a, a), axis=-1)
    nb = sum_(mul(b, b), axis=-1)
    if (na.data <= 0).any() or (nb.data <= 0).any():
        raise ContractError("cosine distance of a zero-norm vector")
    return 1.0 - div(sum_(mul(a, b), axis=-1), sqrt(mul(na, nb)))


def imagination_loss(y_hat, y, y_contrastive, alpha: float) -> Tensor:
    """max(0, alpha + d(y_hat, y) - d(y_hat, y_c)) with cosine distance d."""
    if alpha < 0:
        raise ConfigError("margin must be >= 0")
    return relu(alpha + cosine_distance(y_hat, y) - cosine_distance(y_hat, y_contrastive))


def translation_loss(logits, target_ids) -> Tensor:
    """Mean token NLL of ``target_ids`` under ``logits`` [T, V]; PAD targets skipped."""
    logits = as_tensor(logits)
    target = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != target.shape[0]:
        raise ContractError(f"{logits.shape[0] if logits.ndim else 0} logit rows for {target.shape[0]} targets")
    keep = target != PAD
    if not keep.any():
        raise ContractError("no non-padding target positions")
    return weighted_nll(logits, target, keep / keep.sum())


# ---------------------------------------------------------------- batches

@dataclass
class EncodedExample:
    """One training item as ids and arrays.

    ``src`` excludes BOS and is terminated with EOS; ``tgt`` holds the target
    tokens without BOS/EOS.  Missing modalities are None.
    """

    src: np.ndarray
    tgt: np.ndarray | None = None
    grid: np.ndarray | None = None
    pooled: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.tgt is None and self.pooled is None and self.grid is None:
            raise InputError(f"example {self.id!r} has neither target nor image")


def pad_batch(seqs: list[np.ndarray], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        valid[i, : len(s)] = True
    return out, valid


def teacher_forcing(targets: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-> (decoder inputs, gold outputs, per-position weights = 1/len per example)."""
    ins, _ = pad_batch([np.concatenate([[BOS], t]).astype(np.int64) for t in targets])
    outs, valid = pad_batch([np.concatenate([t, [EOS]]).astype(np.int64) for t in targets])
    weights = valid / valid.sum(axis=1, keepdims=True)
    return ins, outs, weights


def joint_loss(batch: list[EncodedExample], params: ModelParams, rng=None, sample_rng=None,
               contrastive: dict[int, int] | None = None):
    """Summed translation and imagination losses of a batch.

    Returns ``(total, parts)`` where ``total = sum translation + imag_weight *
    sum imagination``.  Examples without a target add no translation term;
    examples without pooled features (or when the imagination objective is
    off, or when no other imaged example exists for a contrastive draw) add
    no imagination term.  ``contrastive`` optionally fixes the contrastive
    partner (batch index -> batch index); otherwise it is drawn uniformly
    from the other imaged examples with ``sample_rng``.
    """
    cfg = params.config
    if not batch:
        raise ContractError("empty batch")
    with_tgt = [i for i, e in enumerate(batch) if e.tgt is not None]
    with_img = [i for i, e in enumerate(batch) if e.pooled is not None] if cfg.imagination else []
    if len(with_img) < 2:
        with_img = []
    if not with_tgt and not with_img:
        raise ContractError("batch carries no trainable objective")

    rows = sorted(set(with_tgt) | set(with_img))
    row_of = {i: r for r, i in enumerate(rows)}
    src, src_valid = pad_batch([batch[i].src for i in rows])
    enc = encoder_forward(params, src, src_valid, rng)

    parts = {"translation": 0.0, "imagination": 0.0, "n_translation": len(with_tgt), "n_imagination": len(with_img)}
    total = None
    if with_tgt:
        sel = [row_of[i] for i in with_tgt]
        enc_t = enc if len(sel) == len(rows) else take(enc, np.array(sel))
        valid_t = src_valid[sel]
        grid = None
        if cfg.multimodal:
            missing = [batch[i].id for i in with_tgt if batch[i].grid is None]
            if missing:
                raise InputError(f"multimodal model needs image grids; missing for {missing[:3]}")
            grid = np.stack([batch[i].grid for i in with_tgt])
        tgt_in, tgt_out, weights = teacher_forcing([batch[i].tgt for i in with_tgt])
        states = decoder_forward(params, tgt_in, enc_t, valid_t, grid, rng)
        trans = weighted_nll(output_logits(params, states), tgt_out, weights)
        parts["translation"] = trans.item()
        total = trans
    if with_img:
        sel = [row_of[i] for i in with_img]
        enc_i = enc if len(sel) == len(rows) else take(enc, np.array(sel))
        y_hat = imagine(enc_i, params, src_valid[sel])
        if sample_rng is None:
            sample_rng = SplitMix64(0)
        partner = []
        for i in with_img:
            if contrastive is not None and i in contrastive:
                j = contrastive[i]
            else:
                others = [k for k in with_img if k != i]
                j = others[sample_rng.randbelow(len(others))]
            partner.append(j)
        y = np.stack([batch[i].pooled for i in with_img])
        y_c = np.stack([batch[j].pooled for j in partner])
        # a prediction whose hidden ReLUs are all off is exactly zero: its
        # distance is undefined and its gradient would be zero, so skip it
        live = np.flatnonzero((y_hat.data * y_hat.data).sum(axis=-1) > 0)
        if len(live) == len(with_img):
            imag = sum_(imagination_loss(y_hat, y, y_c, cfg.margin))
        elif len(live):
            imag = sum_(imagination_loss(take(y_hat, live), y[live], y_c[live], cfg.margin))
        else:
            imag = sum_(mul(y_hat, 0.0))
        parts["n_imagination"] = len(live)
        parts["imagination"] = imag.item()
        weighted = mul(imag, cfg.imag_weight)
        total = weighted if total is None else add(total, weighted)
    return total, parts
