"""Dense tensor math with a rebuildable reverse-mode gradient tape.

Storage is float32 row-major numpy; softmax and the normalization
reductions accumulate in float64 before results are stored back at the
tensor's dtype.  Gradient-check tests may construct float64 tensors; all
ops preserve the dtype of their inputs.

The tape is an explicit object: ops record onto the innermost active
``GradTape`` whenever any input requires gradients, and the tape is
rebuilt from scratch on every forward pass (no graph reuse).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_LOG_FLOOR = math.log(1e-12)

_TAPE_STACK: list["GradTape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense array plus the flag controlling tape recording."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(values, (np.ndarray, np.generic)):
            data = np.asarray(values)  # keep the incoming dtype, even for 0-d scalars
        else:
            data = np.asarray(values, dtype=dtype or np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Records ops in execution order; replayed once, backwards."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self._records.append((out, inputs, vjp))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if tape is not None and needs:
        tape.record(out, tuple(inputs), vjp)
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns adjoints for every tensor that
    required gradients, keyed by tensor identity."""
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    grads: dict[Tensor, np.ndarray] = {}
    for out, inputs, vjp in reversed(tape._records):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        if out.requires_grad:
            grads[out] = g
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi
                holders[key] = t
    for key, g in adjoints.items():
        t = holders[key]
        if t.requires_grad:
            grads[t] = g
    return grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: cannot multiply shapes {tuple(a.data.shape)} and {tuple(b.data.shape)}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        da = g @ b.data.T
        a_flat = a.data.reshape(-1, a.data.shape[-1])
        g_flat = g.reshape(-1, g.shape[-1])
        return (da, a_flat.T @ g_flat)

    return _record(out, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = Tensor(np.ascontiguousarray(a.data.reshape(shape)))
    return _record(out, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(np.swapaxes(a.data, i, j)))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(np.swapaxes(g, i, j)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def rows(a, start: int, stop: int) -> Tensor:
    """Slice along axis 0; gradient scatters back into a zero buffer."""
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data[start:stop]))

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _record(out, (a,), vjp)


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(axis=axis), dtype=a.dtype))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.mean(axis=axis, dtype=np.float64), dtype=a.dtype))
    n = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).astype(a.dtype, copy=True),)
        return (
            np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).astype(a.dtype, copy=True),
        )

    return _record(out, (a,), vjp)


def silu(a) -> Tensor:
    a = _as_tensor(a)
    x64 = a.data.astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-x64))
    out = Tensor((x64 * sig).astype(a.dtype))

    def vjp(g):
        d = sig * (1.0 + x64 * (1.0 - sig))
        return ((g * d).astype(a.dtype),)

    return _record(out, (a,), vjp)


def maximum_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > c
    out = Tensor(np.where(keep, a.data, np.asarray(c, dtype=a.dtype)))
    return _record(out, (a,), lambda g: (np.where(keep, g, 0),))


# ---------------------------------------------------------------------------
# normalized / fused primitives


def _softmax64(x: np.ndarray, axis: int) -> np.ndarray:
    """Softmax with float64 accumulation; -inf entries come only from masks."""
    x64 = x.astype(np.float64, copy=False)
    m = np.max(x64, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ContractError("softmax: a row is fully masked (all entries are -inf)")
    e = np.exp(x64 - m)
    s = np.sum(e, axis=axis, keepdims=True)
    return e / s


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    p64 = _softmax64(a.data, axis)
    out = Tensor(p64.astype(a.dtype))

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        dot = np.sum(g64 * p64, axis=axis, keepdims=True)
        return ((p64 * (g64 - dot)).astype(a.dtype),)

    return _record(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x64 = a.data.astype(np.float64, copy=False)
    m = np.max(x64, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ContractError("log_softmax: a row is fully masked")
    z = x64 - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    logp64 = z - lse
    out = Tensor(logp64.astype(a.dtype))

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        p = np.exp(logp64)
        return ((g64 - p * np.sum(g64, axis=axis, keepdims=True)).astype(a.dtype),)

    return _record(out, (a,), vjp)


def rms_norm(a, gamma, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization over the last axis with a learned scale."""
    a, gamma = _as_tensor(a), _as_tensor(gamma)
    x64 = a.data.astype(np.float64)
    ms = np.mean(x64 * x64, axis=-1, keepdims=True) + eps
    inv = ms**-0.5
    xn = x64 * inv
    out = Tensor((xn * gamma.data.astype(np.float64)).astype(a.dtype))
    n = a.data.shape[-1]

    def vjp(g):
        g64 = g.astype(np.float64)
        gg = g64 * gamma.data.astype(np.float64)
        dot = np.sum(gg * x64, axis=-1, keepdims=True)
        dx = inv * (gg - x64 * (inv * inv / n) * dot)
        dgamma = np.sum(g64 * xn, axis=tuple(range(g64.ndim - 1)))
        return (dx.astype(a.dtype), dgamma.astype(gamma.dtype))

    return _record(out, (a, gamma), vjp)


def embedding(table, ids: np.ndarray) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record(out, (table,), vjp)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean next-token cross entropy over rows; VJP is (softmax - onehot)/rows."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    p64 = _softmax64(logits.data, -1)
    rows_idx = np.arange(logits.data.shape[0])
    nll = -np.log(p64[rows_idx, targets])
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))

    def vjp(g):
        d = p64.copy()
        d[rows_idx, targets] -= 1.0
        return ((d * (g / logits.data.shape[0])).astype(logits.dtype),)

    return _record(out, (logits,), vjp)


def reverse_kl(logits, log_p_target: np.ndarray) -> Tensor:
    """Per-row KL[q || p] where q = softmax(logits) and p is a fixed reference.

    Logs are floored at 1e-12 to match the stabilized definition; the floor
    is inactive for any realistically-scaled logits.
    """
    logits = _as_tensor(logits)
    x64 = logits.data.astype(np.float64)
    m = np.max(x64, axis=-1, keepdims=True)
    z = x64 - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logq = np.maximum(z - lse, _LOG_FLOOR)
    q = np.exp(z - lse)
    diff = logq - log_p_target.astype(np.float64)
    kl = np.sum(q * diff, axis=-1)
    out = Tensor(kl.astype(logits.dtype))

    def vjp(g):
        # d kl_r / d z_i = q_i * ((logq_i - logp_i) - kl_r), with the floor
        # zeroing the logq derivative where active.
        active = logq > _LOG_FLOOR
        inner = diff + np.where(active, 1.0, 0.0)
        dz = q * (inner - np.sum(q * inner, axis=-1, keepdims=True))
        return ((dz * g[..., None]).astype(logits.dtype),)

    return _record(out, (logits,), vjp)


def smooth_l1(pred, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: 0.5 x^2 / beta inside, |x| - beta/2 outside."""
    pred = _as_tensor(pred)
    x = pred.data.astype(np.float64) - target.astype(np.float64)
    inside = np.abs(x) < beta
    val = np.where(inside, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    out = Tensor(val.astype(pred.dtype))

    def vjp(g):
        d = np.where(inside, x / beta, np.sign(x))
        return ((g * d).astype(pred.dtype),)

    return _record(out, (pred,), vjp)
