"""Attention primitive, mask generators and rotary position encoding.

Masks are boolean matrices converted to additive 0/-inf biases at the
score level.  Three generators cover the model's needs: a full
bidirectional mask for attention over the layer axis, the standard causal
mask, and the K-step mask that limits how far drafted positions can see
into the verified-activation store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, _as_tensor, _record, _softmax64

MASK_KINDS = ("lsa_full", "sa_causal", "ca_kstep")


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.allowed, dtype=bool)
        if arr.ndim != 2 or arr.size == 0:
            raise DimensionError(f"mask must be a non-empty 2-D matrix, got shape {arr.shape}")
        if not arr.any(axis=1).all():
            bad = int(np.argmin(arr.any(axis=1)))
            raise ContractError(f"mask row {bad} has no allowed entries")
        object.__setattr__(self, "allowed", arr)

    @property
    def rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def cols(self) -> int:
        return self.allowed.shape[1]

    def bias(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf).astype(dtype)


def make_masks(kind: str, size: int, prompt_len: int = 0, break_points=()) -> AttentionMask:
    """Build one of the three mask patterns.

    ``size`` is the layer count for ``lsa_full`` and the sequence length for
    the other kinds.  For ``ca_kstep``, row i may attend columns j < b where
    b is the largest break point <= i (``prompt_len`` when no break applies).
    """
    if size <= 0:
        raise DimensionError(f"mask over an empty sequence (size={size})")
    if kind == "lsa_full":
        return AttentionMask(np.ones((size, size), dtype=bool))
    if kind == "sa_causal":
        return AttentionMask(np.tril(np.ones((size, size), dtype=bool)))
    if kind == "ca_kstep":
        breaks = list(break_points)
        if prompt_len < 1:
            raise DimensionError("ca_kstep mask needs prompt_len >= 1")
        if any(b < prompt_len for b in breaks) or any(
            b2 <= b1 for b1, b2 in zip(breaks, breaks[1:])
        ):
            raise DimensionError(f"break points must be strictly increasing and >= prompt_len, got {breaks}")
        allowed = np.zeros((size, size), dtype=bool)
        bounds = np.full(size, prompt_len, dtype=np.int64)
        for b in breaks:
            if b < size:
                bounds[b:] = b
        cols = np.arange(size)
        allowed = cols[None, :] < bounds[:, None]
        return AttentionMask(allowed)
    raise ConfigError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


def attention_core(q, k, v, bias: np.ndarray | None, scale: float) -> Tensor:
    """Batched scaled-dot-product attention.

    Shapes: q (B, Tq, D), k (B, Tk, D), v (B, Tk, Dv) -> (B, Tq, Dv).
    ``bias`` is a (Tq, Tk) or (B, Tq, Tk) additive 0/-inf array.  The
    softmax accumulates in float64.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    s = np.einsum("btd,bsd->bts", q.data, k.data) * np.asarray(scale, dtype=q.dtype)
    if bias is not None:
        s = s + bias
    p64 = _softmax64(s, -1)
    p = p64.astype(q.dtype)
    out = Tensor(np.einsum("bts,bsv->btv", p, v.data))

    def vjp(g):
        g64 = g.astype(np.float64)
        v64 = v.data.astype(np.float64)
        dp = np.einsum("btv,bsv->bts", g64, v64)
        dot = np.sum(dp * p64, axis=-1, keepdims=True)
        ds = (p64 * (dp - dot)).astype(q.dtype) * np.asarray(scale, dtype=q.dtype)
        dq = np.einsum("bts,bsd->btd", ds, k.data)
        dk = np.einsum("bts,btd->bsd", ds, q.data)
        dv = np.einsum("bts,btv->bsv", p, g)
        return (dq, dk, dv)

    return _record(out, (q, k, v), vjp)


def repeat_heads(t3, reps: int) -> Tensor:
    """Tile grouped k/v heads up to the query head count (axis 0 of a
    (groups, T, d) tensor); the VJP sums each group's copies."""
    t3 = _as_tensor(t3)
    groups = t3.data.shape[0]
    out = Tensor(np.ascontiguousarray(np.repeat(t3.data, reps, axis=0)))

    def vjp(g):
        return (g.reshape(groups, reps, *t3.data.shape[1:]).sum(axis=1),)

    return _record(out, (t3,), vjp)


def attention(q, k, v, mask: AttentionMask, heads: int = 1, kv_heads: int | None = None) -> Tensor:
    """Multi-head attention over 2-D inputs: softmax(q k^T / sqrt(d) + mask) v.

    q splits into ``heads`` heads; k/v split into ``kv_heads`` (default
    ``heads``) groups of the same head width, each shared by a block of
    query heads.  Scores are scaled by the per-head query width.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    kv_heads = kv_heads or heads
    tq, dq = q.data.shape
    tk, dk = k.data.shape
    tv, dv = v.data.shape
    if tk != tv:
        raise DimensionError(f"attention: k rows {tk} != v rows {tv}")
    if tq != mask.rows or tk != mask.cols:
        raise DimensionError(
            f"attention: mask is {mask.rows}x{mask.cols} but q has {tq} rows and k has {tk}"
        )
    if dq % heads or dk % kv_heads or dv % kv_heads or heads % kv_heads:
        raise ConfigError(
            f"head counts ({heads}, kv {kv_heads}) do not divide embeddings ({dq}, {dk}, {dv})"
        )
    hd = dq // heads
    if dk // kv_heads != hd:
        raise DimensionError(
            f"attention: per-head widths differ (q {hd}, k {dk // kv_heads})"
        )
    sc = 1.0 / math.sqrt(hd)
    bias = mask.bias(q.dtype)
    qh = _split_heads(q, heads)
    kh = _split_heads(k, kv_heads)
    vh = _split_heads(v, kv_heads)
    if kv_heads != heads:
        reps = heads // kv_heads
        kh = repeat_heads(kh, reps)
        vh = repeat_heads(vh, reps)
    out3 = attention_core(qh, kh, vh, bias, sc)
    return _merge_heads(out3, tq, heads * (dv // kv_heads))


def _split_heads(t, heads: int):
    from .tensor import reshape, swapaxes

    rows_, width = t.data.shape
    return swapaxes(reshape(t, (rows_, heads, width // heads)), 0, 1)


def _merge_heads(t3, rows_: int, width: int):
    from .tensor import reshape, swapaxes

    return reshape(swapaxes(t3, 0, 1), (rows_, width))


# ---------------------------------------------------------------------------
# rotary position encoding


def rotary_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """(T, head_dim/2) rotation angles for the given absolute positions."""
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]


_TRIG_CACHE: dict = {}


def _trig_row(position: int, head_dim: int, base: float):
    key = (position, head_dim, base)
    hit = _TRIG_CACHE.get(key)
    if hit is None:
        ang = rotary_angles(np.array([position]), head_dim, base)
        hit = (np.cos(ang), np.sin(ang))
        if len(_TRIG_CACHE) < 1 << 16:
            _TRIG_CACHE[key] = hit
    return hit


def _rotate(x: np.ndarray, angles: np.ndarray, head_dim: int, sign: float, trig=None) -> np.ndarray:
    t, width = x.shape
    blocks = width // head_dim
    xb = x.reshape(t, blocks, head_dim // 2, 2).astype(np.float64)
    cos, sin = trig if trig is not None else (np.cos(angles), np.sin(angles))
    cos = cos[:, None, :]
    sin = sin[:, None, :] * sign
    x0, x1 = xb[..., 0], xb[..., 1]
    out = np.empty_like(xb)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    return out.reshape(t, width)


def rotary(x, positions: np.ndarray, head_dim: int, base: float = 10000.0) -> Tensor:
    """Rotate consecutive pairs inside each head block by position-dependent
    angles.  Rotation is orthogonal, so the VJP is the inverse rotation."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] % head_dim:
        raise DimensionError(f"rotary: width {x.data.shape} not a multiple of head_dim {head_dim}")
    if head_dim % 2:
        raise ConfigError(f"rotary head_dim must be even, got {head_dim}")
    ang = rotary_angles(positions, head_dim, base)
    out = Tensor(_rotate(x.data, ang, head_dim, 1.0).astype(x.dtype))

    def vjp(g):
        return (_rotate(g, ang, head_dim, -1.0).astype(x.dtype),)

    return _record(out, (x,), vjp)


def rotate_np(x: np.ndarray, positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Tape-free rotary used by the incremental inference kernels; single
    positions hit a trig cache since decode repeats them constantly."""
    if len(positions) == 1:
        trig = _trig_row(int(positions[0]), head_dim, base)
        return _rotate(x, None, head_dim, 1.0, trig=trig).astype(x.dtype)
    ang = rotary_angles(positions, head_dim, base)
    return _rotate(x, ang, head_dim, 1.0).astype(x.dtype)
