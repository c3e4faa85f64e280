"""Dense tensors with reverse-mode autodiff, plus one-sided scaling primitives.

The engine is deliberately small: a `Tape` records ops in creation order (which
is already topological), `backward` walks it once in reverse, and gradients
accumulate additively across fan-out. Everything is numpy under the hood;
float64 by default, float32 as a speed mode.

Two non-standard primitives carry the whole unit-scaling mechanism:

- ``scale_fwd(x, k)``: multiplies the forward value by k but passes the
  incoming gradient through unchanged.
- ``scale_bwd(x, k)``: leaves the forward value alone but multiplies the
  gradient flowing to x by k.

Both deliberately break gradient exactness; composing ``scale_fwd(scale_bwd(x,
k), k)`` recovers an exact multiplication by k. Where it is legal to use them
one-sided is the business of the op layer (the cut-edge rule), not the engine.

Broadcasting is restricted to what the model needs and what keeps backward
rules auditable: equal shapes, scalars, or one operand's shape being a
trailing suffix of the other's.
"""

from __future__ import annotations

import threading

import numpy as np

_DTYPE = np.float64

# One tape stack per thread, so concurrent training runs (e.g. parallel sweep
# workers) each record onto their own graphs.
_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = _TAPES.stack = []
    return stack


def set_engine_dtype(name: str) -> None:
    """Select 'float64' (default) or 'float32' for newly created tensors."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"engine dtype must be float64 or float32, got {name!r}")
    _DTYPE = np.float64 if name == "float64" else np.float32


def engine_dtype():
    return _DTYPE


class Tape:
    """Ordered op records; use as a context manager around graph construction."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        assert _tape_stack().pop() is self

    def record(self, out: "Tensor", parents: tuple, backward_fn) -> None:
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, parents, backward_fn in reversed(self.nodes):
            if out.grad is None:
                continue
            for parent, contribution in zip(parents, backward_fn(out.grad)):
                if contribution is None or not parent.requires_grad:
                    continue
                contribution = _unbroadcast(contribution, parent.data.shape)
                if parent.grad is None:
                    parent.grad = contribution.copy() if contribution is out.grad else contribution
                else:
                    parent.grad = parent.grad + contribution


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(out_data, parents: tuple, backward_fn) -> Tensor:
    """Create the output tensor of a custom op and register its backward rule.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent. Exposed so higher-level modules can define fused ops without
    touching engine internals.
    """
    parents = tuple(as_tensor(p) for p in parents)
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, parents, backward_fn)
    return out


def _check_broadcast(a_shape, b_shape) -> None:
    small, big = sorted((tuple(a_shape), tuple(b_shape)), key=len)
    if small not in ((), big[len(big) - len(small):]):
        raise ValueError(
            f"only scalar or trailing-suffix broadcasting is supported, got {a_shape} vs {b_shape}"
        )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of suffix/scalar broadcast)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul_const(a, float(b))
    if isinstance(a, (int, float)):
        return mul_const(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return record_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_const(a, k: float) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data * k, (a,), lambda g: (g * k,))


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul_const(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    inv = 1.0 / b.data
    return record_op(a.data * inv, (a, b), lambda g: (g * inv, -g * a.data * inv * inv))


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (k, n) with a 2D weight, or batched with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"batched matmul needs equal leading dims: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record_op(out, (a, b), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return record_op(np.reshape(a.data, shape), (a,), lambda g: (np.reshape(g, old),))


def gather_rows(table, ids) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError(f"gather_rows needs integer ids, got dtype {ids.dtype}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record_op(table.data[ids], (table,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, shape).copy(),)

    return record_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul_const(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op(y, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return record_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record_op(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return record_op(y, (a,), lambda g: (g * 0.5 / y,))


def where(cond, a, b) -> Tensor:
    """Select by a constant boolean mask (the mask itself is not differentiable)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        )

    return record_op(out, (a, b), backward)


# ---------------------------------------------------------------------------
# one-sided scaling
# ---------------------------------------------------------------------------

def _check_scale(k: float) -> float:
    k = float(k)
    if not np.isfinite(k) or k <= 0.0:
        raise ValueError(f"scale factor must be finite and positive, got {k}")
    return k


def scale_fwd(a, k: float) -> Tensor:
    """Multiply the forward value by k; pass the gradient through unchanged."""
    k = _check_scale(k)
    a = as_tensor(a)
    return record_op(a.data * k, (a,), lambda g: (g,))


def scale_bwd(a, k: float) -> Tensor:
    """Leave the forward value unchanged; multiply the gradient to `a` by k."""
    k = _check_scale(k)
    a = as_tensor(a)
    return record_op(a.data.copy(), (a,), lambda g: (g * k,))


# ---------------------------------------------------------------------------
# verification helper
# ---------------------------------------------------------------------------

def gradcheck(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must build a scalar from exact primitives only — the one-sided scaling
    ops intentionally fail this check.
    """
    with Tape() as tape:
        loss = f(x)
        tape.backward(loss)
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = float(f(x).data)
        flat[i] = keep - eps
        down = float(f(x).data)
        flat[i] = keep
        fd = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - fd) / (abs(a) + abs(fd) + 1e-12))
    return worst
