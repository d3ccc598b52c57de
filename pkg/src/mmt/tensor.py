"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order; :func:`backward` replays the tape in reverse.  Outside a tape
the same functions are plain forward computations, which is what decoding and
finite-difference checks use.

Broadcasting is limited to what the model needs: numpy broadcasting for
elementwise ops and batched ``matmul``; gradients are summed back to each
operand's shape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

DTYPE = np.float64
# Additive "minus infinity" for masked logits; exp() of it is exactly 0.
MASK_VALUE = -np.finfo(np.float64).max

_local = threading.local()


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap_array(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(Node(out, parents, backward))


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Temporarily disable recording (nested forward passes in grad checks)."""
    stack = _tape_stack()
    saved = stack[:]
    stack.append(None)
    try:
        yield
    finally:
        stack[:] = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create a recorded result from raw data and a backward rule.

    ``backward(g)`` receives the upstream gradient (same shape as ``data``)
    and returns one gradient (or None) per parent.
    """
    data = np.asarray(data, dtype=DTYPE)
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced non-finite values")
    parents = tuple(parents)
    rg = any(p.requires_grad for p in parents)
    out = Tensor._wrap_array(data, rg)
    if rg:
        tape = active_tape()
        if tape is not None:
            tape.record(out, parents, backward)
    return out


_op = custom_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _op(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    pos = x.data > 0
    return _op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _op(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _op(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if (x.data < 0).any():
        raise ContractError("sqrt of negative value")
    out = np.sqrt(x.data)
    return _op(out, (x,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy-broadcast over the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # [..., k] @ [k, n]: one GEMM over the flattened leading axes
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _op((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _op(ad @ bd, (a, b), backward)


def swap_last(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _op(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, index) -> Tensor:
    """``x[index]`` for basic or integer-array indices; gradient scatter-adds."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _op(x.data[index], (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return take(table, ids)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _op(out, tuple(items), backward)


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _op(out, tuple(items), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- composite kernels

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks visible entries (broadcastable).

    Hidden entries receive exactly zero weight.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {list(x.shape)}")
    z = x.data if mask is None else np.where(mask, x.data, MASK_VALUE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _op(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _op(out, (x,), backward)


def weighted_nll(logits: Tensor, targets, weights) -> Tensor:
    """``-sum(weights * log softmax(logits)[targets])`` as a scalar.

    ``logits`` is [..., V]; ``targets`` and ``weights`` have the leading shape.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise DimensionError(
            f"weighted_nll: logits {list(logits.shape)} vs targets {list(targets.shape)}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = -(weights * picked).sum()

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (g * weights[..., None] * p,)

    return _op(np.array(out), (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {list(x.shape)}, gain {list(gain.shape)}, bias {list(bias.shape)}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead)
        db = g.sum(axis=lead)
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dg, db

    return _op(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng is None``.

    ``rng`` is anything with a numpy-style ``random(shape)`` method.
    """
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse from the scalar ``loss``.

    Every leaf recorded on the tape gets ``.grad`` set (zeros if the loss does
    not depend on it).  Returns a map leaf -> gradient array.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        for p in node.parents:
            if p.requires_grad and id(p) not in produced:
                leaves.setdefault(id(p), p)
        if g is None:
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = gp if prev is None else prev + gp

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self):
        lines = [f"{name}\t{err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max_rel_err\t{self.max_error:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def grad_check(f, inputs, step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` is a sequence or a name -> Tensor mapping; ``f`` is called with
    the tensors positionally (or the mapping itself when a mapping is given).
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"arg{i}": t for i, t in enumerate(inputs)}

    def call():
        return f(inputs) if isinstance(inputs, dict) else f(*inputs)

    for t in named.values():
        t.requires_grad = True
    with Tape() as tape:
        loss = call()
    backward(loss, tape)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for k, t in named.items()}

    errors = {}
    with no_tape():
        for name, t in named.items():
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = call().item()
                flat[i] = orig - step
                down = call().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * step)
            errors[name] = relative_error(analytic[name].reshape(-1), numeric, floor)
    return GradCheckReport(errors, tol)
