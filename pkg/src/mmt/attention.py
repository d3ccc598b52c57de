"""Scaled dot-product and multi-head attention.

One implementation serves decoder self-attention, textual cross-attention and
the visual cross-attention over image grid features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, as_tensor, custom_op, matmul, softmax_rows


def causal_mask(n: int) -> np.ndarray:
    """Visible iff key index <= query index."""
    return np.tril(np.ones((n, n), dtype=bool))


def key_mask(valid: np.ndarray, n_queries: int) -> np.ndarray:
    """[B, n_k] key validity -> [B, n_q, n_k] attention mask."""
    valid = np.asarray(valid, dtype=bool)
    return np.broadcast_to(valid[:, None, :], (valid.shape[0], n_queries, valid.shape[1]))


def scaled_dot_attention(q, k, v, scale_dim: int, mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(scale_dim)) v over the last two axes.

    Returns ``(context, weights)``.  ``mask`` marks visible keys and must leave
    at least one visible key per query row.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = matmul(q, k.T) * (1.0 / math.sqrt(scale_dim))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, scores.shape)
        except ValueError:
            raise DimensionError(f"mask {list(mask.shape)} does not fit scores {list(scores.shape)}") from None
        if not full.any(axis=-1).all():
            raise ContractError("attention mask hides every key of some query")
    weights = softmax_rows(scores, mask)
    return matmul(weights, v), weights


@dataclass
class MultiHeadParams:
    """Per-head projections stacked on a leading head axis.

    w_q, w_k, w_v: [h, d, d_h]; w_o: [h, d_h, d] (applied to each head's
    context before the heads are summed).
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @property
    def h(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_h(self) -> int:
        return self.w_q.shape[2]

    @classmethod
    def init(cls, d: int, h: int, rng) -> "MultiHeadParams":
        if h < 1 or d % h:
            raise ConfigError(f"model dimension {d} is not divisible by {h} heads")
        d_h = d // h
        std_in = 1.0 / math.sqrt(d)
        std_out = 1.0 / math.sqrt(d)
        return cls(
            Tensor(rng.normal((h, d, d_h), std_in), requires_grad=True),
            Tensor(rng.normal((h, d, d_h), std_in), requires_grad=True),
            Tensor(rng.normal((h, d, d_h), std_in), requires_grad=True),
            Tensor(rng.normal((h, d_h, d), std_out), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def head_project(x, w) -> Tensor:
    """x [..., n, d], w [h, d, d_h] -> per-head projections [..., h, n, d_h].

    out[..., i, :, :] = x @ w[i]; all heads are computed with one GEMM.
    """
    x, w = as_tensor(x), as_tensor(w)
    h, d, d_h = w.shape
    if x.shape[-1] != d:
        raise DimensionError(f"projection input width {x.shape[-1]} != {d}")
    lead, n = x.shape[:-2], x.shape[-2]
    x2 = x.data.reshape(-1, d)
    w2 = w.data.transpose(1, 0, 2).reshape(d, h * d_h)
    out = (x2 @ w2).reshape(lead + (n, h, d_h))
    out = np.moveaxis(out, -2, -3)

    def backward(g):
        g2 = np.moveaxis(g, -3, -2).reshape(-1, h * d_h)
        gx = (g2 @ w2.T).reshape(x.shape)
        gw = (x2.T @ g2).reshape(d, h, d_h).transpose(1, 0, 2)
        return gx, gw

    return custom_op(out, (x, w), backward)


def head_merge(ctx, w) -> Tensor:
    """ctx [..., h, n, d_h], w [h, d_h, d] -> sum_i ctx[..., i] @ w[i], shape [..., n, d].

    The sum over heads is the head axis of a single contraction.
    """
    ctx, w = as_tensor(ctx), as_tensor(w)
    h, d_h, d = w.shape
    lead, n = ctx.shape[:-3], ctx.shape[-2]
    c2 = np.moveaxis(ctx.data, -3, -2).reshape(-1, h * d_h)
    w2 = w.data.reshape(h * d_h, d)
    out = (c2 @ w2).reshape(lead + (n, d))

    def backward(g):
        g2 = g.reshape(-1, d)
        gc = np.moveaxis((g2 @ w2.T).reshape(lead + (n, h, d_h)), -2, -3)
        gw = (c2.T @ g2).reshape(h, d_h, d)
        return gc, gw

    return custom_op(out, (ctx, w), backward)


def multi_head_attention(
    q_in,
    k_in,
    v_in,
    params: MultiHeadParams,
    mask: np.ndarray | None = None,
    scale_mode: str = "per_head",
    return_weights: bool = False,
):
    """Sum over heads of attention(q W_q[i], k W_k[i], v W_v[i]) W_o[i].

    Inputs are [n, d] or [B, n, d]; a mask of shape [n_q, n_k] or
    [B, n_q, n_k] is broadcast over heads.  ``scale_mode`` is "per_head"
    (divide scores by sqrt(d_h)) or "model_dim" (divide by sqrt(d)).
    """
    q_in, k_in, v_in = as_tensor(q_in), as_tensor(k_in), as_tensor(v_in)
    d = params.d
    for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
        if t.shape[-1] != d:
            raise DimensionError(f"{name} width {t.shape[-1]} != model dimension {d}")
    if scale_mode == "per_head":
        scale_dim = params.d_h
    elif scale_mode == "model_dim":
        scale_dim = d
    else:
        raise ConfigError(f"unknown scale_mode {scale_mode!r}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:]) if mask.ndim >= 3 else mask

    q = head_project(q_in, params.w_q)  # [..., h, n_q, d_h]
    k = head_project(k_in, params.w_k)
    v = head_project(v_in, params.w_v)
    ctx, weights = scaled_dot_attention(q, k, v, scale_dim, mask)
    out = head_merge(ctx, params.w_o)
    return (out, weights) if return_weights else out
