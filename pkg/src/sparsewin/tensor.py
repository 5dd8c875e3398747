"""Minimal dense tensor core with reverse-mode differentiation.

Values live in numpy arrays (float32 by default; float64 is accepted so
verification code can run the same operations at higher precision).
Operations record onto an explicit tape when one is active:

    tape = Tape()
    with tape:
        loss = cross_entropy(model_out, labels)
    tape.backward(loss)

Each tape is single-threaded; independent tapes may run on separate
threads (the active-tape stack is thread-local).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # keep float32/float64 ndarrays as-is; everything else becomes float32
            dtype = data.dtype if isinstance(data, np.ndarray) and \
                data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Op:
    __slots__ = ("out_id", "inputs", "backward_fn")

    def __init__(self, out_id: int, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out_id = out_id
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; backward walks it exactly once, in reverse."""

    def __init__(self):
        self._ops: list[_Op] = []
        self._produced: set[int] = set()
        self._done = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self._ops.append(_Op(id(out), inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from `loss`."""
        if self._done:
            raise RuntimeError("tape already consumed by a previous backward() call")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss is detached: not produced by an operation on this tape")
        self._done = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for op in reversed(self._ops):
            g_out = grads.pop(op.out_id, None)
            if g_out is None:
                continue
            contribs = op.backward_fn(g_out)
            for t, g in zip(op.inputs, contribs):
                if g is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if t.requires_grad and key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Run reverse-mode differentiation of `loss` over `tape`."""
    tape.backward(loss)


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward_fn)
    return out


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# constructors

def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, dtype=DEFAULT_DTYPE,
          requires_grad: bool = False) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a 1-D bias broadcast over the last axis."""
    _check_same_dtype(a, b)
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _wrap(a.data + b.data)

    def bwd(g):
        gb = g if b.shape == a.shape else g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, gb

    return _maybe_record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = _wrap(a.data - b.data)
    return _maybe_record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = _wrap(a.data * b.data)
    return _maybe_record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = _wrap(a.data * s)
    return _maybe_record(out, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or batched with identical leading dims."""
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape} x {bd.shape}")
    if ad.ndim != bd.ndim or (ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]):
        raise ValueError(f"matmul batch dims must match: {ad.shape} x {bd.shape}")
    out = _wrap(np.matmul(ad, bd))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _maybe_record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.shape
    out = _wrap(a.data.reshape(shape))
    return _maybe_record(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _wrap(np.ascontiguousarray(a.data.transpose(axes)))
    return _maybe_record(out, (a,), lambda g: (g.transpose(inv),))


def roll(a: Tensor, shifts, axes) -> Tensor:
    """Toroidal roll along the given axes."""
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = _wrap(np.roll(a.data, shifts, axis=axes))
    neg = tuple(-s for s in shifts)
    return _maybe_record(out, (a,), lambda g: (np.roll(g, neg, axis=axes),))


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Take rows along `axis`; gradient scatters back with accumulation."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"index out of range for axis {axis} with size {a.shape[axis]}")
    out = _wrap(np.take(a.data, idx, axis=axis))
    unique = idx.size == np.unique(idx).size

    def bwd(g):
        ga = np.zeros_like(a.data)
        if unique:
            np.moveaxis(ga, axis, 0)[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _maybe_record(out, (a,), bwd)


def index_copy(base: Tensor, indices, values: Tensor, axis: int = 0) -> Tensor:
    """Copy of `base` with rows at `indices` replaced by `values`."""
    _check_same_dtype(base, values)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size != values.shape[axis]:
        raise ValueError(f"index_copy size mismatch: {idx.size} indices vs {values.shape[axis]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[axis]):
        raise IndexError(f"index out of range for axis {axis} with size {base.shape[axis]}")
    data = base.data.copy()
    np.moveaxis(data, axis, 0)[idx] = np.moveaxis(values.data, axis, 0)
    out = _wrap(data)

    def bwd(g):
        g_vals = np.take(g, idx, axis=axis)
        g_base = g.copy()
        np.moveaxis(g_base, axis, 0)[idx] = 0
        return g_base, g_vals

    return _maybe_record(out, (base, values), bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor) -> Tensor:
    out = _wrap(a.data.sum(dtype=a.data.dtype).reshape(()))
    return _maybe_record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def mean(a: Tensor, axes) -> Tensor:
    """Mean over the given axes (kept axes preserved, reduced axes dropped)."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = _wrap(a.data.mean(axis=axes))
    inv = a.data.dtype.type(1.0 / n)

    def bwd(g):
        g_exp = np.expand_dims(g, axes)
        return (np.broadcast_to(g_exp * inv, a.shape).astype(a.data.dtype),)

    return _maybe_record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinear layers

def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _wrap(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _maybe_record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last axis, then affine scale/shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm affine shape mismatch: x has C={c}, gamma {gamma.shape}, beta {beta.shape}")
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv_std
    out = _wrap((xhat * gamma.data + beta.data).astype(dt, copy=False))

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv_std * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx.astype(dt, copy=False), g_gamma, g_beta

    return _maybe_record(out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    dt = x.data.dtype
    cdf = 0.5 * (1.0 + erf(x.data * dt.type(_INV_SQRT2)))
    out = _wrap((x.data * cdf).astype(dt, copy=False))

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * dt.type(_INV_SQRT2PI)
        return ((g * (cdf + x.data * pdf)).astype(dt, copy=False),)

    return _maybe_record(out, (x,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under `logits` [B, K]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects logits [B, K] and labels [B], got {logits.shape} and {labels.shape}")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(b), labels] - np.log(e.sum(axis=1)))
    out = _wrap(np.asarray(nll.mean(), dtype=logits.data.dtype).reshape(()))

    def bwd(g):
        gl = p.copy()
        gl[np.arange(b), labels] -= 1.0
        gl *= float(g) / b
        return (gl.astype(logits.data.dtype, copy=False),)

    return _maybe_record(out, (logits,), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))
