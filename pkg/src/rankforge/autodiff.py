"""Dense float64 tensors with reverse-mode automatic differentiation.

A thread-local tape records every primitive applied to tensors that require
gradients.  ``backward(loss)`` replays the tape in reverse, accumulating
gradients into the ``.grad`` field of every leaf tensor it reaches.  Tapes
are single-use: a second backward over the same tape is rejected.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

NEG_MASK = -1e9  # additive attention-mask bias for padded key positions


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (double backward, non-scalar loss)."""


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications; inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def record(self, node: _Node):
        self.nodes.append(node)


class _TapeState(threading.local):
    def __init__(self):
        self.tape: Tape | None = None
        self.grad_enabled = True


_STATE = _TapeState()


class no_grad:
    """Context manager disabling tape recording (evaluation passes)."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def active_tape() -> Tape | None:
    return _STATE.tape


class Tensor:
    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, inputs: Sequence[Tensor], values: np.ndarray,
            backward_fn: Callable) -> Tensor:
    need = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=need)
    if need:
        tape = _STATE.tape
        if tape is None or tape.consumed:
            tape = Tape()
            _STATE.tape = tape
        tape.record(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor):
    """Populate ``.grad`` on every requiring leaf reachable from ``loss``.

    Leaves that were recorded on the tape but do not influence the loss
    receive an explicit zero gradient.  Consumes the tape.
    """
    if loss.values.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = _STATE.tape
    if tape is None or not tape.nodes:
        raise TapeError("backward called with an empty tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape.consumed = True
    _STATE.tape = None

    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced by the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # flush accumulated grads into leaves; unreached leaves get zeros
    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            if not t.requires_grad or id(t) in produced or id(t) in seen:
                continue
            seen.add(id(t))
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.values)
            t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _record("add", (a, b), a.values + b.values,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _record("sub", (a, b), a.values - b.values,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.values, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _record("mul", (a, b), a.values * b.values,
                   lambda g: (_unbroadcast(g * b.values, a.shape),
                              _unbroadcast(g * a.values, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 1 or b.values.ndim < 2:
        raise ShapeError(f"matmul: ranks {a.values.ndim} and {b.values.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")

    if a.values.ndim > 2 and b.values.ndim == 2:
        # stacked @ 2-D weight: one large gemm instead of a per-slice loop
        lead = a.shape[:-1]
        a2 = a.values.reshape(-1, a.shape[-1])
        values = (a2 @ b.values).reshape(lead + (b.shape[-1],))

        def bwd(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.values.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _record("matmul", (a, b), values, bwd)

    values = a.values @ b.values

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), values, bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), values, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    dim = a.shape[axis]
    if start < 0 or start + length > dim:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range for dim {dim}")
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        return (full,)

    return _record("narrow", (a,), a.values[idx], bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _record("reshape", (a,), a.values.reshape(shape),
                   lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", (a,), a.values.transpose(axes),
                   lambda g: (g.transpose(inv),))


def softmax(a: Tensor, mask_bias: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, with an optional additive constant
    mask folded in (padded keys carry NEG_MASK)."""
    if mask_bias is not None:
        s = a.values + mask_bias
    else:
        s = a.values.copy()
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.einsum("...i,...i->...", g, s)[..., None]
        out = g - dot
        out *= s
        return (out,)

    return _record("softmax", (a,), s, bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance.

    Constant rows normalize to zeros (zero-variance convention).  Affine
    scale/shift is composed outside via mul/add.
    """
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv

    def bwd(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _record("layer_norm", (a,), y, bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.values
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    values = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record("gelu", (a,), values, bwd)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.values))
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.values), lambda g: (g / a.values,))


def sum_all(a: Tensor) -> Tensor:
    return _record("sum_all", (a,), np.asarray(a.values.sum()),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

    return _record("sum_axis", (a,), a.values.sum(axis=axis), bwd)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _record("mean_axis", (a,), a.values.mean(axis=axis), bwd)


def gather(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("gather", (table,), table.values[idx], bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, mask_bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention composed from primitives.

    q, k, v: (..., T, dk).  ``mask_bias`` broadcasts onto the score matrix
    (..., Tq, Tk); padded keys carry ``NEG_MASK``.  The 1/sqrt(dk) scale is
    folded into q and the mask into the softmax so no extra score-sized
    intermediates are materialized.
    """
    dk = q.shape[-1]
    if k.shape[-1] != dk or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention: shapes q{q.shape} k{k.shape} v{v.shape} do not conform")
    scaled_q = mul(q, Tensor(1.0 / np.sqrt(dk)))
    scores = matmul(scaled_q, transpose(k, _swap_last(k)))
    weights = softmax(scores, mask_bias=None if mask_bias is None else mask_bias.values)
    return matmul(weights, v)


def _swap_last(t: Tensor) -> tuple[int, ...]:
    axes = list(range(t.values.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
