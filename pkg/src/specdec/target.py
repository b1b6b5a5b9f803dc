"""The large model: a decoder-only transformer exposing the dynamic-system
interface used by speculative decoding.

Two forward paths exist on purpose:

* ``forward_batch`` — vectorized over positions, tape-capable, used for
  training and prompt prefill;
* ``forward_token`` — a single-position kernel whose reductions depend only
  on its own context length, used for incremental decoding, verification
  and the frozen top-layer replay.  Because verification gathers each
  candidate's exact ancestor context and calls this same kernel, greedy
  speculative output is bit-identical to vanilla greedy decoding.

Layer structure is Llama-like at toy scale: pre-norm RMS, rotary q/k, a
kv bottleneck (attention runs at width ``kv_embed`` < ``embed``), SiLU MLP.
Activation taps follow the layer-by-layer decomposition: tap ``L - N`` is
the stream entering decoder layer ``L - N + 1`` (1-indexed), and the last
tap is the post-final-norm activation fed to the lm head.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import attention, make_masks, rotary, rotate_np
from .errors import CapacityError, ConfigError, DimensionError, TrainingError
from .optim import Adam
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    layers: int = 8
    embed: int = 64
    kv_embed: int = 16
    heads: int = 4
    mlp_hidden: int = 256
    max_seq: int = 512
    eos_token: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.vocab_size < 2 or self.layers < 1:
            raise ConfigError("need vocab_size >= 2 and layers >= 1")
        if self.embed % self.heads or self.kv_embed % self.heads:
            raise ConfigError(
                f"heads={self.heads} must divide embed={self.embed} and kv_embed={self.kv_embed}"
            )
        if self.kv_embed % self.head_dim or self.heads % (self.kv_embed // self.head_dim):
            raise ConfigError(
                f"kv_embed={self.kv_embed} must split into grouped kv heads of width {self.head_dim}"
            )
        if self.head_dim % 2:
            raise ConfigError("head width must be even for rotary encoding")

    @property
    def head_dim(self) -> int:
        return self.embed // self.heads

    @property
    def kv_heads(self) -> int:
        return self.kv_embed // self.head_dim

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "layers": self.layers,
            "embed": self.embed,
            "kv_embed": self.kv_embed,
            "heads": self.heads,
            "mlp_hidden": self.mlp_hidden,
            "max_seq": self.max_seq,
            "eos_token": self.eos_token,
            "rope_base": self.rope_base,
        }


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_in: Tensor
    w_out: Tensor

    FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_in", "w_out")

    def tensors(self):
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class ModelWeights:
    config: ModelConfig
    token_embed: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    lm_head: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("token_embed", self.token_embed)]
        for i, lw in enumerate(self.layers):
            for f in LayerWeights.FIELDS:
                out.append((f"layers.{i}.{f}", getattr(lw, f)))
        out.append(("final_norm", self.final_norm))
        out.append(("lm_head", self.lm_head))
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float32).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    rng = np.random.default_rng(seed)
    e, ekv, hid = config.embed, config.kv_embed, config.mlp_hidden

    def mat(rows_, cols, fan):
        return Tensor(
            (rng.standard_normal((rows_, cols)) / math.sqrt(fan)).astype(np.float32),
            requires_grad=True,
        )

    res = math.sqrt(2 * config.layers)
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerWeights(
                attn_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
                wq=mat(e, e, e),
                wk=mat(e, ekv, e),
                wv=mat(e, ekv, e),
                wo=Tensor(
                    (rng.standard_normal((e, e)) / (math.sqrt(e) * res)).astype(np.float32),
                    requires_grad=True,
                ),
                mlp_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
                w_in=mat(e, hid, e),
                w_out=Tensor(
                    (rng.standard_normal((hid, e)) / (math.sqrt(hid) * res)).astype(np.float32),
                    requires_grad=True,
                ),
            )
        )
    return ModelWeights(
        config=config,
        token_embed=Tensor(
            (rng.standard_normal((config.vocab_size, e)) * 0.02).astype(np.float32),
            requires_grad=True,
        ),
        layers=layers,
        final_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
        lm_head=mat(e, config.vocab_size, e),
    )


# ---------------------------------------------------------------------------
# state


class KVCache:
    """Per-layer key/value store; append-only except explicit truncation."""

    def __init__(self, config: ModelConfig):
        self._config = config
        shape = (config.layers, config.max_seq, config.kv_embed)
        self._k = np.zeros(shape, dtype=np.float32)
        self._v = np.zeros(shape, dtype=np.float32)
        self.length = 0

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer, : self.length]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer, : self.length]

    def append_block(self, k_cols: np.ndarray, v_cols: np.ndarray):
        """k_cols/v_cols: (layers, count, kv_embed)."""
        count = k_cols.shape[1]
        if self.length + count > self._config.max_seq:
            raise CapacityError(f"cache would exceed max_seq={self._config.max_seq}")
        self._k[:, self.length : self.length + count] = k_cols
        self._v[:, self.length : self.length + count] = v_cols
        self.length += count

    def truncate(self, new_len: int):
        if new_len > self.length:
            raise DimensionError(f"truncate({new_len}) beyond current length {self.length}")
        self.length = new_len


class StateSnapshot:
    """Full dynamic-system state: cache, per-position activation taps and
    the token sequence.  All three share one length."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.cache = KVCache(config)
        self._taps = np.zeros((config.layers + 1, config.max_seq, config.embed), dtype=np.float32)
        self._tokens = np.zeros(config.max_seq, dtype=np.int64)

    @property
    def length(self) -> int:
        return self.cache.length

    @property
    def tokens(self) -> np.ndarray:
        return self._tokens[: self.length]

    def taps(self, offset: int) -> np.ndarray:
        """Activation rows for the stream predicted at target-layer offset
        ``offset`` (0 = post-final-norm lm-head input)."""
        if not 0 <= offset <= self.config.layers - 1:
            raise ConfigError(f"target layer offset must lie in [0, {self.config.layers - 1}]")
        return self._taps[self.config.layers - offset, : self.length]

    def all_taps(self) -> np.ndarray:
        return self._taps[:, : self.length]

    def append_block(self, tokens, taps_cols, k_cols, v_cols):
        start = self.length
        count = len(tokens)
        self.cache.append_block(k_cols, v_cols)
        self._taps[:, start : start + count] = taps_cols
        self._tokens[start : start + count] = tokens

    def truncate(self, new_len: int):
        self.cache.truncate(new_len)

    def clone(self) -> "StateSnapshot":
        other = StateSnapshot(self.config)
        other.cache._k[...] = self.cache._k
        other.cache._v[...] = self.cache._v
        other.cache.length = self.cache.length
        other._taps[...] = self._taps
        other._tokens[...] = self._tokens
        return other


# ---------------------------------------------------------------------------
# batched forward (training / prefill)


class BatchResult:
    def __init__(self, taps, keys, values, logits):
        self.taps = taps  # list of (T, E) tensors, index l holds stream o^{l+1}
        self.keys = keys
        self.values = values
        self.logits = logits


def _check_tokens(config: ModelConfig, tokens: np.ndarray):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DimensionError("token sequence must be a non-empty 1-D array")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        bad = int(tokens[(tokens < 0) | (tokens >= config.vocab_size)][0])
        raise DimensionError(f"token id {bad} outside vocabulary of size {config.vocab_size}")
    if tokens.size > config.max_seq:
        raise CapacityError(f"sequence of {tokens.size} exceeds max_seq={config.max_seq}")
    return tokens


def forward_batch(weights: ModelWeights, tokens: np.ndarray) -> BatchResult:
    cfg = weights.config
    tokens = _check_tokens(cfg, tokens)
    t_len = tokens.size
    pos = np.arange(t_len)
    mask = make_masks("sa_causal", t_len)
    x = T.embedding(weights.token_embed, tokens)
    taps = [x]
    keys, values = [], []
    for lw in weights.layers:
        xn = T.rms_norm(x, lw.attn_norm)
        q = rotary(xn @ lw.wq, pos, cfg.head_dim, cfg.rope_base)
        k = rotary(xn @ lw.wk, pos, cfg.head_dim, cfg.rope_base)
        v = xn @ lw.wv
        x = x + (attention(q, k, v, mask, heads=cfg.heads, kv_heads=cfg.kv_heads) @ lw.wo)
        xn2 = T.rms_norm(x, lw.mlp_norm)
        x = x + (T.silu(xn2 @ lw.w_in) @ lw.w_out)
        taps.append(x)
        keys.append(k)
        values.append(v)
    o_final = T.rms_norm(x, weights.final_norm)
    taps[-1] = o_final  # lm-head input replaces the raw last-layer stream
    return BatchResult(taps, keys, values, o_final @ weights.lm_head)


def forward_full(weights: ModelWeights, tokens: np.ndarray) -> tuple[StateSnapshot, np.ndarray]:
    """Prefill: full forward returning the populated snapshot and the
    per-position next-token logits."""
    res = forward_batch(weights, tokens)
    cfg = weights.config
    snap = StateSnapshot(cfg)
    taps_cols = np.stack([t.data for t in res.taps], axis=0)
    k_cols = np.stack([k.data for k in res.keys], axis=0)
    v_cols = np.stack([v.data for v in res.values], axis=0)
    snap.append_block(np.asarray(tokens, dtype=np.int64), taps_cols, k_cols, v_cols)
    return snap, res.logits.data


# ---------------------------------------------------------------------------
# single-position kernel


def _rms_np(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x64 = x.astype(np.float64)
    inv = (np.mean(x64 * x64) + eps) ** -0.5
    return (x64 * inv * gamma.astype(np.float64)).astype(np.float32)


def _silu_np(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def _attend_single(
    q: np.ndarray, keys: np.ndarray, vals: np.ndarray, heads: int, head_dim: int
) -> np.ndarray:
    """One query row against a gathered context.  Every reduction runs over
    a strip whose length depends only on the context, keeping results
    bit-reproducible across batching contexts."""
    s = keys.shape[0]
    kv_heads = keys.shape[1] // head_dim
    reps = heads // kv_heads
    q3 = q.reshape(heads, head_dim).astype(np.float64)
    k3 = np.repeat(keys.reshape(s, kv_heads, head_dim), reps, axis=1).astype(np.float64)
    v3 = np.repeat(vals.reshape(s, kv_heads, head_dim), reps, axis=1).astype(np.float64)
    scores = np.sum(k3 * q3[None, :, :], axis=2) * (1.0 / math.sqrt(head_dim))  # (s, heads)
    m = scores.max(axis=0)
    e = np.exp(scores - m)
    p = e / e.sum(axis=0)
    out = np.sum(p[:, :, None] * v3, axis=0)  # (heads, head_dim)
    return out.reshape(heads * head_dim).astype(np.float32)


def forward_token(
    weights: ModelWeights,
    contexts: list[tuple[np.ndarray, np.ndarray]],
    token: int,
    position: int,
):
    """Forward one token whose attention context per layer is given
    explicitly (rows strictly before this position, in sequence order).

    Returns (taps_col (L+1, E), k_col (L, E_kv), v_col (L, E_kv), logits).
    """
    cfg = weights.config
    if not 0 <= token < cfg.vocab_size:
        raise DimensionError(f"token id {token} outside vocabulary of size {cfg.vocab_size}")
    x = weights.token_embed.data[token]
    taps = np.empty((cfg.layers + 1, cfg.embed), dtype=np.float32)
    k_col = np.empty((cfg.layers, cfg.kv_embed), dtype=np.float32)
    v_col = np.empty((cfg.layers, cfg.kv_embed), dtype=np.float32)
    taps[0] = x
    pos_arr = np.array([position])
    for li, lw in enumerate(weights.layers):
        xn = _rms_np(x, lw.attn_norm.data)
        q = rotate_np((xn @ lw.wq.data)[None, :], pos_arr, cfg.head_dim, cfg.rope_base)[0]
        k = rotate_np((xn @ lw.wk.data)[None, :], pos_arr, cfg.head_dim, cfg.rope_base)[0]
        v = xn @ lw.wv.data
        ctx_k, ctx_v = contexts[li]
        full_k = np.concatenate([ctx_k, k[None, :]], axis=0)
        full_v = np.concatenate([ctx_v, v[None, :]], axis=0)
        att = _attend_single(q, full_k, full_v, cfg.heads, cfg.head_dim)
        x = x + att @ lw.wo.data
        xn2 = _rms_np(x, lw.mlp_norm.data)
        x = x + _silu_np(xn2 @ lw.w_in.data) @ lw.w_out.data
        taps[li + 1] = x
        k_col[li] = k
        v_col[li] = v
    o_final = _rms_np(x, weights.final_norm.data)
    taps[cfg.layers] = o_final
    logits = o_final @ weights.lm_head.data
    return taps, k_col, v_col, logits


def forward_incremental(weights: ModelWeights, snapshot: StateSnapshot, new_token: int):
    """Append one token to the snapshot; transactional on capacity errors."""
    cfg = weights.config
    if snapshot.length + 1 > cfg.max_seq:
        raise CapacityError(f"snapshot at {snapshot.length} cannot grow past max_seq={cfg.max_seq}")
    contexts = [(snapshot.cache.keys(l), snapshot.cache.values(l)) for l in range(cfg.layers)]
    taps, k_col, v_col, logits = forward_token(weights, contexts, int(new_token), snapshot.length)
    snapshot.append_block(
        np.array([new_token], dtype=np.int64), taps[:, None, :], k_col[:, None, :], v_col[:, None, :]
    )
    return snapshot, logits


def decode_layers(
    weights: ModelWeights,
    snapshot: StateSnapshot,
    input_activation: np.ndarray,
    layer_range: range,
    drafted_kv: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
    position: int | None = None,
):
    """Run only the frozen top decoder layers on one activation row.

    ``layer_range`` holds 0-based layer indices and must end at the last
    layer (the final norm is applied after it).  ``drafted_kv`` maps layer
    index to (k_rows, v_rows) extending the verified cache for exactly the
    layers in range.  Returns (lm-head input row, {layer: (k, v)} new columns).
    """
    cfg = weights.config
    idx = list(layer_range)
    if any(l < 0 or l >= cfg.layers for l in idx):
        raise ConfigError(f"layer range {idx} outside [0, {cfg.layers - 1}]")
    if idx and (idx[-1] != cfg.layers - 1 or idx != list(range(idx[0], cfg.layers))):
        raise ConfigError(f"layer range {idx} must be a contiguous suffix ending at the top layer")
    drafted_kv = drafted_kv or {}
    drafted_len = 0
    for l in idx:
        if l in drafted_kv:
            drafted_len = drafted_kv[l][0].shape[0]
            break
    if position is None:
        position = snapshot.length + drafted_len
    x = np.asarray(input_activation, dtype=np.float32)
    new_cols: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    pos_arr = np.array([position])
    for l in idx:
        lw = weights.layers[l]
        xn = _rms_np(x, lw.attn_norm.data)
        q = rotate_np((xn @ lw.wq.data)[None, :], pos_arr, cfg.head_dim, cfg.rope_base)[0]
        k = rotate_np((xn @ lw.wk.data)[None, :], pos_arr, cfg.head_dim, cfg.rope_base)[0]
        v = xn @ lw.wv.data
        parts_k = [snapshot.cache.keys(l)]
        parts_v = [snapshot.cache.values(l)]
        if l in drafted_kv:
            dk, dv = drafted_kv[l]
            parts_k.append(dk)
            parts_v.append(dv)
        full_k = np.concatenate(parts_k + [k[None, :]], axis=0)
        full_v = np.concatenate(parts_v + [v[None, :]], axis=0)
        att = _attend_single(q, full_k, full_v, cfg.heads, cfg.head_dim)
        x = x + att @ lw.wo.data
        xn2 = _rms_np(x, lw.mlp_norm.data)
        x = x + _silu_np(xn2 @ lw.w_in.data) @ lw.w_out.data
        new_cols[l] = (k, v)
    if idx:
        x = _rms_np(x, weights.final_norm.data)
    return x, new_cols


# ---------------------------------------------------------------------------
# samplers & decoding


class GreedySampler:
    stochastic = False

    def select(self, logits: np.ndarray) -> int:
        return int(np.argmax(logits))  # ties resolve to the lowest token id


class TemperatureSampler:
    stochastic = True

    def __init__(self, rng: np.random.Generator, temperature: float = 1.0):
        self.rng = rng
        self.temperature = temperature

    def probs(self, logits: np.ndarray) -> np.ndarray:
        x = logits.astype(np.float64) / self.temperature
        x -= x.max()
        e = np.exp(x)
        return e / e.sum()

    def select(self, logits: np.ndarray) -> int:
        return int(self.rng.choice(logits.shape[0], p=self.probs(logits)))


def vanilla_decode(weights: ModelWeights, prompt: np.ndarray, sampler, max_new: int) -> np.ndarray:
    """Reference auto-regressive decode; returns the generated continuation."""
    snap, logits_all = forward_full(weights, prompt)
    last_logits = logits_all[-1]
    out = []
    for step in range(max_new):
        tok = sampler.select(last_logits)
        out.append(tok)
        if tok == weights.config.eos_token or step == max_new - 1:
            break
        _, last_logits = forward_incremental(weights, snap, tok)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# training


def train_target(
    weights: ModelWeights,
    corpus: list[np.ndarray],
    steps: int,
    lr: float,
    batch_size: int = 8,
    seed: int = 0,
    heldout: list[np.ndarray] | None = None,
    log_every: int = 50,
):
    """Next-token cross-entropy training; returns (step, train, eval) rows."""
    rng = np.random.default_rng(seed)
    params = weights.trainable()
    opt = Adam(params, lr=lr)
    curve = []

    def eval_loss():
        if not heldout:
            return float("nan")
        tot = 0.0
        for seq in heldout:
            res = forward_batch(weights, seq)
            tot += T.cross_entropy(T.rows(res.logits, 0, len(seq) - 1), seq[1:]).item()
        return tot / len(heldout)

    for step in range(steps):
        batch_idx = rng.integers(0, len(corpus), size=batch_size)
        with GradTape() as tape:
            losses = []
            for i in batch_idx:
                seq = corpus[i]
                res = forward_batch(weights, seq)
                losses.append(T.cross_entropy(T.rows(res.logits, 0, len(seq) - 1), seq[1:]))
            loss = T.scale(sum(losses[1:], losses[0]), 1.0 / batch_size)
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingError("target training diverged", step=step)
        grads = backward(loss, tape)
        opt.step(grads)
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, val, eval_loss()))
    return curve
