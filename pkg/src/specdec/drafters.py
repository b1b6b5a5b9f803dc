"""Draft models behind one common drafting interface.

Three variants:

* ``moa`` — the mixture-of-attentions drafter: layer self-attention with
  mean aggregation compresses the target's (T, L, 2*E_kv) cache to
  (T, 2*E_kv); a causal self-attention layer runs over tokens; a
  cross-attention layer queries the aggregated store; for ``n > 0`` the
  prediction is finished by the target's frozen top ``n`` decoder layers.
* ``eagle`` — the autoregressive activation-predicting baseline: one
  decoder layer over fused [activation, token-embedding] inputs, 1-step
  bounded because each new position needs the previously predicted
  activation.
* ``independent`` — a small standalone decoder stack sharing the target's
  token embedding and lm head, consuming no target activations at all.

States are incremental: per-block key/value caches grow row by row, are
truncated on rollback, and can be cloned cheaply for tree branching.
Drafted frozen-layer cache entries never survive a verification event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import AttentionMask, attention, attention_core, make_masks, rotate_np, rotary
from .errors import ConfigError, DimensionError, ProtocolError
from .tensor import GradTape, Tensor

VARIANTS = ("moa", "eagle", "independent")


@dataclass(frozen=True)
class DrafterConfig:
    variant: str = "moa"
    n: int = 0  # target layer offset: the drafter predicts the stream n layers below the head
    heads: int = 2
    lsa_kv: int = 16
    lsa_mlp: int = 96
    sa_kv: int = 16
    sa_mlp: int = 64
    ca_kv: int = 16
    ca_mlp: int = 112
    use_layer_embedding: bool = True
    use_lsa: bool = True  # ablation: raw lm-head-input taps as CA keys/values
    eagle_noise: float = 0.0  # uniform observation noise at training time
    independent_layers: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown drafter variant {self.variant!r}")
        for name in ("lsa_kv", "sa_kv", "ca_kv"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if (self.sa_kv // self.heads) % 2:
            raise ConfigError("sa head width must be even for rotary encoding")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n": self.n,
            "heads": self.heads,
            "lsa_kv": self.lsa_kv,
            "lsa_mlp": self.lsa_mlp,
            "sa_kv": self.sa_kv,
            "sa_mlp": self.sa_mlp,
            "ca_kv": self.ca_kv,
            "ca_mlp": self.ca_mlp,
            "use_layer_embedding": self.use_layer_embedding,
            "use_lsa": self.use_lsa,
            "eagle_noise": self.eagle_noise,
            "independent_layers": self.independent_layers,
        }


# ---------------------------------------------------------------------------
# attention building blocks


@dataclass
class Block:
    """Pre-norm residual attention + MLP block weights."""

    norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_in: Tensor
    w_out: Tensor

    FIELDS = ("norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_in", "w_out")

    def named(self, prefix: str):
        return [(f"{prefix}.{f}", getattr(self, f)) for f in self.FIELDS]


def _init_block(rng, width: int, kv: int, mlp: int, kv_in: int | None = None) -> Block:
    kv_in = kv_in if kv_in is not None else width

    def mat(rows_, cols):
        return Tensor(
            (rng.standard_normal((rows_, cols)) / math.sqrt(rows_)).astype(np.float32),
            requires_grad=True,
        )

    return Block(
        norm=Tensor(np.ones(width, dtype=np.float32), requires_grad=True),
        wq=mat(width, kv),
        wk=mat(kv_in, kv),
        wv=mat(kv_in, kv),
        wo=Tensor(
            (rng.standard_normal((kv, width)) / (2.0 * math.sqrt(kv))).astype(np.float32),
            requires_grad=True,
        ),
        mlp_norm=Tensor(np.ones(width, dtype=np.float32), requires_grad=True),
        w_in=mat(width, mlp),
        w_out=Tensor(
            (rng.standard_normal((mlp, width)) / (2.0 * math.sqrt(mlp))).astype(np.float32),
            requires_grad=True,
        ),
    )


def _mlp(x, block: Block):
    return x + (T.silu(T.rms_norm(x, block.mlp_norm) @ block.w_in) @ block.w_out)


def _rms_np(x, gamma, eps=1e-6):
    x64 = x.astype(np.float64)
    inv = (np.mean(x64 * x64) + eps) ** -0.5
    return (x64 * inv * gamma.astype(np.float64)).astype(np.float32)


def _silu_np(x):
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def _attend_row(q, keys, vals, heads):
    """Single-row attention; strip reductions only, like the target kernel."""
    s, width = keys.shape
    hd = width // heads
    q3 = q.reshape(heads, hd).astype(np.float64)
    k3 = keys.reshape(s, heads, hd).astype(np.float64)
    v3 = vals.reshape(s, heads, hd).astype(np.float64)
    scores = np.sum(k3 * q3[None], axis=2) * (1.0 / math.sqrt(hd))
    m = scores.max(axis=0)
    e = np.exp(scores - m)
    p = e / e.sum(axis=0)
    return np.sum(p[:, :, None] * v3, axis=0).reshape(width).astype(np.float32)


def _mlp_row(x, block: Block):
    return x + _silu_np(_rms_np(x, block.mlp_norm.data) @ block.w_in.data) @ block.w_out.data


# ---------------------------------------------------------------------------
# layer self-attention + aggregation


def lsa_aggregate(weights: "MoaWeights", kv_block, use_layer_embedding: bool | None = None) -> Tensor:
    """Compress per-token all-layer (key, value) stacks to one vector each.

    ``kv_block``: (tokens, layers, 2*E_kv).  Full bidirectional attention
    runs over the layer axis with every token treated independently, then
    an MLP and a mean over layers produce the (tokens, 2*E_kv) output.
    """
    blk = weights.lsa
    if use_layer_embedding is None:
        use_layer_embedding = weights.config.use_layer_embedding
    kv_block = kv_block if isinstance(kv_block, Tensor) else Tensor(np.asarray(kv_block, dtype=np.float32))
    if kv_block.data.ndim != 3 or kv_block.data.shape[1] != weights.layer_embed.data.shape[0]:
        raise DimensionError(
            f"lsa input must be (tokens, {weights.layer_embed.data.shape[0]}, width), got {kv_block.data.shape}"
        )
    toks, n_layers, width = kv_block.data.shape
    z = kv_block + weights.layer_embed if use_layer_embedding else kv_block
    heads = weights.config.heads
    zn = T.rms_norm(z, blk.norm)
    q = _heads3(zn @ blk.wq, heads)
    k = _heads3(zn @ blk.wk, heads)
    v = _heads3(zn @ blk.wv, heads)
    hd = blk.wq.data.shape[1] // heads
    att = attention_core(q, k, v, None, 1.0 / math.sqrt(hd))
    z = z + (_unheads3(att, toks, heads) @ blk.wo)
    z = _mlp(z, blk)
    return T.mean(z, axis=1)


def _heads3(x3, heads):
    # (B, T, h*d) -> (B*h, T, d)
    b, t, w = x3.data.shape
    x4 = T.reshape(x3, (b, t, heads, w // heads))
    x4 = T.swapaxes(x4, 1, 2)
    return T.reshape(x4, (b * heads, t, w // heads))


def _unheads3(x3, b, heads):
    bh, t, d = x3.data.shape
    x4 = T.reshape(x3, (b, heads, t, d))
    x4 = T.swapaxes(x4, 1, 2)
    return T.reshape(x4, (b, t, heads * d))


# ---------------------------------------------------------------------------
# weights


@dataclass
class MoaWeights:
    config: DrafterConfig
    layer_embed: Tensor
    lsa: Block
    sa: Block
    ca: Block
    out_norm: Tensor
    out_proj: Tensor

    def named_tensors(self):
        out = [("layer_embed", self.layer_embed)]
        out += self.lsa.named("lsa") + self.sa.named("sa") + self.ca.named("ca")
        out += [("out_norm", self.out_norm), ("out_proj", self.out_proj)]
        return out

    def trainable(self):
        ts = [t for _, t in self.named_tensors()]
        if not self.config.use_lsa:
            lsa_set = {id(t) for _, t in self.lsa.named("lsa")} | {id(self.layer_embed)}
            ts = [t for t in ts if id(t) not in lsa_set]
        return ts


@dataclass
class EagleWeights:
    config: DrafterConfig
    fuse: Tensor
    layer: "object"  # target.LayerWeights over target dims
    out_norm: Tensor
    out_proj: Tensor

    def named_tensors(self):
        out = [("fuse", self.fuse)]
        out += [(f"layer.{f}", getattr(self.layer, f)) for f in self.layer.FIELDS]
        out += [("out_norm", self.out_norm), ("out_proj", self.out_proj)]
        return out

    def trainable(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class IndependentWeights:
    config: DrafterConfig
    layers: list
    final_norm: Tensor

    def named_tensors(self):
        out = []
        for i, lw in enumerate(self.layers):
            out += [(f"layers.{i}.{f}", getattr(lw, f)) for f in lw.FIELDS]
        out.append(("final_norm", self.final_norm))
        return out

    def trainable(self):
        return [t for _, t in self.named_tensors()]


def init_drafter_weights(config: DrafterConfig, target_config, seed: int):
    from .target import LayerWeights

    rng = np.random.default_rng(seed)
    e = target_config.embed
    c = 2 * target_config.kv_embed
    if config.variant == "moa":
        ca_kv_in = c if config.use_lsa else e
        return MoaWeights(
            config=config,
            layer_embed=Tensor(
                (rng.standard_normal((target_config.layers, c)) * 0.02).astype(np.float32),
                requires_grad=True,
            ),
            lsa=_init_block(rng, c, config.lsa_kv, config.lsa_mlp),
            sa=_init_block(rng, e, config.sa_kv, config.sa_mlp),
            ca=_init_block(rng, e, config.ca_kv, config.ca_mlp, kv_in=ca_kv_in),
            out_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
            out_proj=Tensor(
                (rng.standard_normal((e, e)) / math.sqrt(e)).astype(np.float32), requires_grad=True
            ),
        )
    if config.variant == "eagle":

        def mat(rows_, cols, fan):
            return Tensor(
                (rng.standard_normal((rows_, cols)) / math.sqrt(fan)).astype(np.float32),
                requires_grad=True,
            )

        layer = LayerWeights(
            attn_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
            wq=mat(e, e, e),
            wk=mat(e, target_config.kv_embed, e),
            wv=mat(e, target_config.kv_embed, e),
            wo=Tensor((rng.standard_normal((e, e)) / (2 * math.sqrt(e))).astype(np.float32), requires_grad=True),
            mlp_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
            w_in=mat(e, target_config.mlp_hidden, e),
            w_out=Tensor(
                (rng.standard_normal((target_config.mlp_hidden, e)) / (2 * math.sqrt(target_config.mlp_hidden))).astype(
                    np.float32
                ),
                requires_grad=True,
            ),
        )
        return EagleWeights(
            config=config,
            fuse=mat(2 * e, e, 2 * e),
            layer=layer,
            out_norm=Tensor(np.ones(e, dtype=np.float32), requires_grad=True),
            out_proj=mat(e, e, e),
        )
    # independent
    from .target import init_model, ModelConfig

    sub_cfg = replace_model_layers(target_config, config.independent_layers)
    sub = init_model(sub_cfg, seed)
    return IndependentWeights(config=config, layers=sub.layers, final_norm=sub.final_norm)


def replace_model_layers(target_config, n_layers):
    from .target import ModelConfig

    d = target_config.to_dict()
    d["layers"] = n_layers
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# incremental draft states


def _grow(cap, width, dtype=np.float32):
    return np.zeros((cap, width), dtype=dtype)


@dataclass
class MoaState:
    tokens: list
    committed_len: int  # committed tokens incl. the pending (not yet verified) one
    agg: np.ndarray
    agg_len: int
    ca_k: np.ndarray
    ca_v: np.ndarray
    sa_k: np.ndarray
    sa_v: np.ndarray
    sa_x: np.ndarray  # SA block output stream per encoded row
    sa_len: int
    tli_k: np.ndarray | None  # (n, cap, E_kv) verified frozen-layer cache
    tli_v: np.ndarray | None
    tli_len: int
    hat_k: np.ndarray | None  # drafted frozen-layer cache, discarded on verification
    hat_v: np.ndarray | None
    hat_len: int
    pred_len: int = 0
    last_logits: np.ndarray | None = None

    def clone(self):
        return MoaState(
            tokens=list(self.tokens),
            committed_len=self.committed_len,
            agg=self.agg,  # aggregated store frozen within a cycle: safe to share
            agg_len=self.agg_len,
            ca_k=self.ca_k,
            ca_v=self.ca_v,
            sa_k=self.sa_k.copy(),
            sa_v=self.sa_v.copy(),
            sa_x=self.sa_x.copy(),
            sa_len=self.sa_len,
            tli_k=self.tli_k,
            tli_v=self.tli_v,
            tli_len=self.tli_len,
            hat_k=None if self.hat_k is None else self.hat_k.copy(),
            hat_v=None if self.hat_v is None else self.hat_v.copy(),
            hat_len=self.hat_len,
            pred_len=self.pred_len,
            last_logits=self.last_logits,
        )


@dataclass
class EagleState:
    tokens: list
    committed_len: int
    taps: np.ndarray  # row r holds the activation emitted at row r (gt or predicted)
    k: np.ndarray
    v: np.ndarray
    enc_len: int

    def clone(self):
        return EagleState(
            tokens=list(self.tokens),
            committed_len=self.committed_len,
            taps=self.taps.copy(),
            k=self.k.copy(),
            v=self.v.copy(),
            enc_len=self.enc_len,
        )


@dataclass
class IndependentState:
    tokens: list
    committed_len: int
    k: np.ndarray  # (layers, cap, E_kv)
    v: np.ndarray
    enc_len: int
    last_logits: np.ndarray | None = None

    def clone(self):
        return IndependentState(
            tokens=list(self.tokens),
            committed_len=self.committed_len,
            k=self.k.copy(),
            v=self.v.copy(),
            enc_len=self.enc_len,
            last_logits=self.last_logits,
        )


# ---------------------------------------------------------------------------
# the drafters


class Drafter:
    """Common interface: start a session from the bootstrap payload, draft
    token logits one position at a time, observe verification commits."""

    variant: str

    def __init__(self, config: DrafterConfig, weights, target_weights):
        self.config = config
        self.weights = weights
        self.target = target_weights
        self.lsa_calls = 0  # engine invariant: at most one aggregation per cycle

    # shared target tensors
    @property
    def token_embed(self):
        return self.target.token_embed

    @property
    def lm_head(self):
        return self.target.lm_head

    def start(self, prompt_tokens, first_token, payload) -> object:
        raise NotImplementedError

    def observe_commit(self, state, new_tokens, payload):
        raise NotImplementedError

    def draft_next(self, state) -> np.ndarray:
        raise NotImplementedError

    def append_drafted(self, state, token: int):
        state.tokens.append(int(token))

    def clone_state(self, state):
        return state.clone()

    def rollback(self, state):
        """Drop the drafted tail (tokens beyond the committed ones)."""
        raise NotImplementedError


class MoaDrafter(Drafter):
    variant = "moa"

    def __init__(self, config, weights: MoaWeights, target_weights):
        super().__init__(config, weights, target_weights)
        tc = target_weights.config
        self._cap = tc.max_seq + 8
        self._frozen = list(range(tc.layers - config.n, tc.layers))

    def ca_source_width(self) -> int:
        return 2 * self.target.config.kv_embed if self.config.use_lsa else self.target.config.embed

    def start(self, prompt_tokens, first_token, payload):
        tc = self.target.config
        c = self.ca_source_width()
        n = self.config.n
        st = MoaState(
            tokens=[int(t) for t in prompt_tokens] + [int(first_token)],
            committed_len=len(prompt_tokens) + 1,
            agg=_grow(self._cap, c),
            agg_len=0,
            ca_k=_grow(self._cap, self.config.ca_kv),
            ca_v=_grow(self._cap, self.config.ca_kv),
            sa_k=_grow(self._cap, self.config.sa_kv),
            sa_v=_grow(self._cap, self.config.sa_kv),
            sa_x=_grow(self._cap, tc.embed),
            sa_len=0,
            tli_k=_grow(self._cap, tc.kv_embed)[None].repeat(n, 0) if n else None,
            tli_v=_grow(self._cap, tc.kv_embed)[None].repeat(n, 0) if n else None,
            tli_len=0,
            hat_k=np.zeros((n, 64, tc.kv_embed), dtype=np.float32) if n else None,
            hat_v=np.zeros((n, 64, tc.kv_embed), dtype=np.float32) if n else None,
            hat_len=0,
        )
        self._ingest_payload(st, payload)
        self._encode_rows(st)
        return st

    def _ingest_payload(self, st: MoaState, payload):
        """payload: per newly-verified row, [agg_vec] + n frozen-layer kv columns."""
        n = self.config.n
        kv = self.target.config.kv_embed
        for row in payload:
            agg_vec = row[0]
            st.agg[st.agg_len] = agg_vec
            st.ca_k[st.agg_len] = agg_vec @ self.weights.ca.wk.data
            st.ca_v[st.agg_len] = agg_vec @ self.weights.ca.wv.data
            st.agg_len += 1
            for j in range(n):
                col = row[1 + j]
                st.tli_k[j, st.tli_len] = col[:kv]
                st.tli_v[j, st.tli_len] = col[kv:]
            if n:
                st.tli_len += 1

    def _encode_rows(self, st: MoaState):
        """Run the causal SA block over any not-yet-encoded token rows."""
        blk = self.weights.sa
        heads = self.config.heads
        hd = self.config.sa_kv // heads
        tc = self.target.config
        while st.sa_len < len(st.tokens):
            i = st.sa_len
            x = self.token_embed.data[st.tokens[i]]
            xn = _rms_np(x, blk.norm.data)
            pos = np.array([i])
            q = rotate_np((xn @ blk.wq.data)[None], pos, hd, tc.rope_base)[0]
            k = rotate_np((xn @ blk.wk.data)[None], pos, hd, tc.rope_base)[0]
            v = xn @ blk.wv.data
            st.sa_k[i] = k
            st.sa_v[i] = v
            att = _attend_row(q, st.sa_k[: i + 1], st.sa_v[: i + 1], heads)
            x = x + att @ blk.wo.data
            x = _mlp_row(x, blk)
            st.sa_x[i] = x
            st.sa_len += 1

    def draft_next(self, state: MoaState) -> np.ndarray:
        if state.agg_len == 0:
            raise ProtocolError("drafting before the prompt bootstrap was ingested")
        if state.pred_len == len(state.tokens) and state.last_logits is not None:
            return state.last_logits
        self._encode_rows(state)
        blk = self.weights.ca
        heads = self.config.heads
        x = state.sa_x[state.sa_len - 1]
        xn = _rms_np(x, blk.norm.data)
        q = xn @ blk.wq.data
        att = _attend_row(q, state.ca_k[: state.agg_len], state.ca_v[: state.agg_len], heads)
        x = x + att @ blk.wo.data
        x = _mlp_row(x, blk)
        o_hat = _rms_np(x, self.weights.out_norm.data) @ self.weights.out_proj.data
        o_final = self._run_frozen(state, o_hat)
        state.pred_len = len(state.tokens)
        state.last_logits = o_final @ self.lm_head.data
        return state.last_logits

    def _run_frozen(self, state: MoaState, o_hat: np.ndarray) -> np.ndarray:
        """Finish the prediction with the target's frozen top layers,
        extending the drafted frozen-layer cache."""
        n = self.config.n
        if n == 0:
            return o_hat
        from .target import _attend_single as target_attend

        tc = self.target.config
        position = state.tli_len + state.hat_len
        pos_arr = np.array([position])
        x = o_hat
        if state.hat_len + 1 > state.hat_k.shape[1]:
            state.hat_k = np.concatenate([state.hat_k, np.zeros_like(state.hat_k)], axis=1)
            state.hat_v = np.concatenate([state.hat_v, np.zeros_like(state.hat_v)], axis=1)
        for j, l in enumerate(self._frozen):
            lw = self.target.layers[l]
            xn = _rms_np(x, lw.attn_norm.data)
            q = rotate_np((xn @ lw.wq.data)[None], pos_arr, tc.head_dim, tc.rope_base)[0]
            k = rotate_np((xn @ lw.wk.data)[None], pos_arr, tc.head_dim, tc.rope_base)[0]
            v = xn @ lw.wv.data
            full_k = np.concatenate(
                [state.tli_k[j, : state.tli_len], state.hat_k[j, : state.hat_len], k[None]], axis=0
            )
            full_v = np.concatenate(
                [state.tli_v[j, : state.tli_len], state.hat_v[j, : state.hat_len], v[None]], axis=0
            )
            att = target_attend(q, full_k, full_v, tc.heads, tc.head_dim)
            x = x + att @ lw.wo.data
            xn2 = _rms_np(x, lw.mlp_norm.data)
            x = x + _silu_np(xn2 @ lw.w_in.data) @ lw.w_out.data
            state.hat_k[j, state.hat_len] = k
            state.hat_v[j, state.hat_len] = v
        state.hat_len += 1
        return _rms_np(x, self.target.final_norm.data)

    def rollback(self, state: MoaState):
        state.tokens = state.tokens[: state.committed_len]
        state.sa_len = min(state.sa_len, state.committed_len)
        state.hat_len = 0  # drafted frozen-layer cache never survives verification
        state.pred_len = 0
        state.last_logits = None

    def observe_commit(self, state: MoaState, new_tokens, payload):
        self.rollback(state)
        self._ingest_payload(state, payload)
        state.tokens.extend(int(t) for t in new_tokens)
        state.committed_len = len(state.tokens)
        self._encode_rows(state)


class EagleDrafter(Drafter):
    variant = "eagle"

    def __init__(self, config, weights: EagleWeights, target_weights):
        super().__init__(config, weights, target_weights)
        self._cap = target_weights.config.max_seq + 8

    def start(self, prompt_tokens, first_token, payload):
        tc = self.target.config
        st = EagleState(
            tokens=[int(t) for t in prompt_tokens] + [int(first_token)],
            committed_len=len(prompt_tokens) + 1,
            taps=_grow(self._cap, tc.embed),
            k=_grow(self._cap, tc.kv_embed),
            v=_grow(self._cap, tc.kv_embed),
            enc_len=0,
        )
        self._ingest_payload(st, payload, start_row=0)
        return st

    def _ingest_payload(self, st: EagleState, payload, start_row: int | None = None):
        row0 = st.committed_len - 1 if start_row is None else start_row
        for i, row in enumerate(payload):
            st.taps[row0 + i] = row[0]
        # rows encoded from predicted activations are stale once ground
        # truth arrives; row0 itself was encoded from already-exact inputs
        st.enc_len = min(st.enc_len, row0 + 1)

    def draft_next(self, state: EagleState) -> np.ndarray:
        from .target import _attend_single as target_attend

        tc = self.target.config
        lw = self.weights.layer
        while state.enc_len < len(state.tokens):
            i = state.enc_len
            prev_tap = state.taps[i - 1] if i > 0 else np.zeros(tc.embed, dtype=np.float32)
            fused = np.concatenate([prev_tap, self.token_embed.data[state.tokens[i]]])
            x = fused @ self.weights.fuse.data
            xn = _rms_np(x, lw.attn_norm.data)
            pos = np.array([i])
            q = rotate_np((xn @ lw.wq.data)[None], pos, tc.head_dim, tc.rope_base)[0]
            k = rotate_np((xn @ lw.wk.data)[None], pos, tc.head_dim, tc.rope_base)[0]
            v = xn @ lw.wv.data
            state.k[i] = k
            state.v[i] = v
            att = target_attend(q, state.k[: i + 1], state.v[: i + 1], tc.heads, tc.head_dim)
            x = x + att @ lw.wo.data
            xn2 = _rms_np(x, lw.mlp_norm.data)
            x = x + _silu_np(xn2 @ lw.w_in.data) @ lw.w_out.data
            if i >= state.committed_len - 1:
                # predicted activation, reused autoregressively; rows with
                # ground truth keep it
                state.taps[i] = (
                    _rms_np(x, self.weights.out_norm.data) @ self.weights.out_proj.data
                )
            state.enc_len += 1
        return state.taps[state.enc_len - 1] @ self.lm_head.data

    def rollback(self, state: EagleState):
        state.tokens = state.tokens[: state.committed_len]
        state.enc_len = min(state.enc_len, state.committed_len)

    def observe_commit(self, state: EagleState, new_tokens, payload):
        self.rollback(state)
        self._ingest_payload(state, payload)
        state.tokens.extend(int(t) for t in new_tokens)
        state.committed_len = len(state.tokens)


class IndependentDrafter(Drafter):
    variant = "independent"

    def __init__(self, config, weights: IndependentWeights, target_weights):
        super().__init__(config, weights, target_weights)
        self._cap = target_weights.config.max_seq + 8

    def start(self, prompt_tokens, first_token, payload):
        tc = self.target.config
        n_layers = len(self.weights.layers)
        st = IndependentState(
            tokens=[int(t) for t in prompt_tokens] + [int(first_token)],
            committed_len=len(prompt_tokens) + 1,
            k=np.zeros((n_layers, self._cap, tc.kv_embed), dtype=np.float32),
            v=np.zeros((n_layers, self._cap, tc.kv_embed), dtype=np.float32),
            enc_len=0,
        )
        return st

    def draft_next(self, state: IndependentState) -> np.ndarray:
        from .target import _attend_single as target_attend

        tc = self.target.config
        while state.enc_len < len(state.tokens):
            i = state.enc_len
            x = self.token_embed.data[state.tokens[i]]
            pos = np.array([i])
            for li, lw in enumerate(self.weights.layers):
                xn = _rms_np(x, lw.attn_norm.data)
                q = rotate_np((xn @ lw.wq.data)[None], pos, tc.head_dim, tc.rope_base)[0]
                k = rotate_np((xn @ lw.wk.data)[None], pos, tc.head_dim, tc.rope_base)[0]
                v = xn @ lw.wv.data
                state.k[li, i] = k
                state.v[li, i] = v
                att = target_attend(q, state.k[li, : i + 1], state.v[li, : i + 1], tc.heads, tc.head_dim)
                x = x + att @ lw.wo.data
                xn2 = _rms_np(x, lw.mlp_norm.data)
                x = x + _silu_np(xn2 @ lw.w_in.data) @ lw.w_out.data
            state.enc_len += 1
            if state.enc_len == len(state.tokens):
                state.last_logits = _rms_np(x, self.weights.final_norm.data) @ self.lm_head.data
        return state.last_logits

    def rollback(self, state: IndependentState):
        state.tokens = state.tokens[: state.committed_len]
        state.enc_len = min(state.enc_len, state.committed_len)

    def observe_commit(self, state: IndependentState, new_tokens, payload):
        self.rollback(state)
        state.tokens.extend(int(t) for t in new_tokens)
        state.committed_len = len(state.tokens)


def build_drafter(config: DrafterConfig, weights, target_weights) -> Drafter:
    cls = {"moa": MoaDrafter, "eagle": EagleDrafter, "independent": IndependentDrafter}[config.variant]
    return cls(config, weights, target_weights)


# ---------------------------------------------------------------------------
# verification payloads (shared by the single-device engine and the server)


def payload_rows(drafter_config: DrafterConfig, moa_weights, target_weights, snapshot, start: int, stop: int):
    """Per-token activation rows the drafter needs for rows [start, stop).

    moa: LSA-aggregated vector plus, for each frozen top layer, its new
    (key, value) column; eagle / moa-without-LSA: the lm-head-input tap;
    independent: nothing.
    """
    count = stop - start
    if count <= 0:
        return []
    if drafter_config.variant == "independent":
        return [[] for _ in range(count)]
    if drafter_config.variant == "eagle" or not drafter_config.use_lsa:
        taps = snapshot.taps(0)[start:stop]
        return [[taps[i].copy()] for i in range(count)]
    tc = target_weights.config
    kv_block = np.empty((count, tc.layers, 2 * tc.kv_embed), dtype=np.float32)
    for l in range(tc.layers):
        kv_block[:, l, : tc.kv_embed] = snapshot.cache.keys(l)[start:stop]
        kv_block[:, l, tc.kv_embed :] = snapshot.cache.values(l)[start:stop]
    agg = lsa_aggregate(moa_weights, kv_block).data
    rows_out = []
    frozen = range(tc.layers - drafter_config.n, tc.layers)
    for i in range(count):
        row = [agg[i]]
        for l in frozen:
            row.append(
                np.concatenate([snapshot.cache.keys(l)[start + i], snapshot.cache.values(l)[start + i]])
            )
        rows_out.append(row)
    return rows_out


# ---------------------------------------------------------------------------
# batched forwards (training and the sequential-equivalence oracles)


def moa_forward_batch(
    weights: MoaWeights,
    target_weights,
    tokens,
    agg,
    ca_mask: AttentionMask,
    block_start: int = 0,
    frozen_gt: list[tuple] | None = None,
    gt_mask: np.ndarray | None = None,
    hat_mask: np.ndarray | None = None,
):
    """Whole-block mixture-of-attentions forward.

    Self-attention runs causally over all ``tokens``; the cross-attention
    block, prediction head and frozen-layer replay cover only rows from
    ``block_start`` on.  ``agg`` is the (S, C) cross-attention source and
    ``ca_mask`` is (block, S).  For ``n > 0``, ``frozen_gt`` holds per
    frozen layer the already-verified (k, v) rows seen through boolean
    ``gt_mask`` (block, S_gt); the block's own drafted columns are seen
    through ``hat_mask`` (block, block), causal by default.
    Returns (o_hat rows, lm-head input rows, logits rows) for the block.
    """
    cfg = weights.config
    tc = target_weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = tokens.size
    positions = np.arange(t_len)
    heads = cfg.heads
    x = T.embedding(target_weights.token_embed, tokens)
    # causal self-attention block
    blk = weights.sa
    sa_mask = make_masks("sa_causal", t_len)
    xn = T.rms_norm(x, blk.norm)
    q = rotary(xn @ blk.wq, positions, cfg.sa_kv // heads, tc.rope_base)
    k = rotary(xn @ blk.wk, positions, cfg.sa_kv // heads, tc.rope_base)
    v = xn @ blk.wv
    x = x + (attention(q, k, v, sa_mask, heads=heads) @ blk.wo)
    x = _mlp(x, blk)
    if block_start:
        x = T.rows(x, block_start, t_len)
    # cross-attention block over the aggregated store
    blk = weights.ca
    agg_t = agg if isinstance(agg, Tensor) else Tensor(np.asarray(agg, dtype=np.float32))
    xn = T.rms_norm(x, blk.norm)
    x = x + (attention(xn @ blk.wq, agg_t @ blk.wk, agg_t @ blk.wv, ca_mask, heads=heads) @ blk.wo)
    x = _mlp(x, blk)
    o_hat = T.rms_norm(x, weights.out_norm) @ weights.out_proj
    o_final = frozen_layers_batch(
        target_weights, cfg.n, o_hat, positions[block_start:], frozen_gt, gt_mask, hat_mask
    )
    return o_hat, o_final, o_final @ target_weights.lm_head


def frozen_layers_batch(
    target_weights,
    n: int,
    x_rows,
    positions: np.ndarray,
    frozen_gt: list[tuple] | None,
    gt_mask: np.ndarray | None,
    hat_mask: np.ndarray | None = None,
):
    """Run the frozen top ``n`` target layers over a block of predicted
    stream rows.  Gradients flow through activations but the layer weights
    are consumed as constants."""
    tc = target_weights.config
    if n == 0:
        return x_rows
    t_len = x_rows.data.shape[0]
    if hat_mask is None:
        hat_mask = np.tril(np.ones((t_len, t_len), dtype=bool))
    x = x_rows
    for j, l in enumerate(range(tc.layers - n, tc.layers)):
        lw = target_weights.layers[l]
        xn = T.rms_norm(x, _const(lw.attn_norm))
        q = rotary(xn @ _const(lw.wq), positions, tc.head_dim, tc.rope_base)
        k = rotary(xn @ _const(lw.wk), positions, tc.head_dim, tc.rope_base)
        v = xn @ _const(lw.wv)
        if frozen_gt is not None and gt_mask is not None:
            gk, gv = frozen_gt[j]
            keys = T.concat([Tensor(np.asarray(gk, dtype=np.float32)), k], axis=0)
            vals = T.concat([Tensor(np.asarray(gv, dtype=np.float32)), v], axis=0)
            mask = AttentionMask(np.concatenate([gt_mask, hat_mask], axis=1))
        else:
            keys, vals, mask = k, v, AttentionMask(hat_mask)
        att = attention(q, keys, vals, mask, heads=tc.heads, kv_heads=tc.kv_heads)
        x = x + (att @ _const(lw.wo))
        xn2 = T.rms_norm(x, _const(lw.mlp_norm))
        x = x + (T.silu(xn2 @ _const(lw.w_in)) @ _const(lw.w_out))
    return T.rms_norm(x, _const(target_weights.final_norm))


def _const(t: Tensor) -> Tensor:
    """Frozen weights enter the training graph as constants."""
    return t.detach()


def eagle_forward_batch(weights: EagleWeights, target_weights, tokens, gt_taps, noise_rng=None):
    """Teacher-forced baseline forward: row i consumes the ground-truth
    activation emitted at row i-1 plus the row's token embedding."""
    tc = target_weights.config
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = tokens.size
    gt_taps = np.asarray(gt_taps, dtype=np.float32)
    prev = np.concatenate([np.zeros((1, tc.embed), dtype=np.float32), gt_taps[:-1]], axis=0)
    if noise_rng is not None and cfg.eagle_noise > 0:
        prev = prev + noise_rng.uniform(
            -cfg.eagle_noise, cfg.eagle_noise, size=prev.shape
        ).astype(np.float32)
    emb = T.embedding(target_weights.token_embed, tokens)
    fused = T.concat([Tensor(prev), emb], axis=1)
    x = fused @ weights.fuse
    lw = weights.layer
    positions = np.arange(t_len)
    mask = make_masks("sa_causal", t_len)
    xn = T.rms_norm(x, lw.attn_norm)
    q = rotary(xn @ lw.wq, positions, tc.head_dim, tc.rope_base)
    k = rotary(xn @ lw.wk, positions, tc.head_dim, tc.rope_base)
    v = xn @ lw.wv
    x = x + (attention(q, k, v, mask, heads=tc.heads, kv_heads=tc.kv_heads) @ lw.wo)
    xn2 = T.rms_norm(x, lw.mlp_norm)
    x = x + (T.silu(xn2 @ lw.w_in) @ lw.w_out)
    o_hat = T.rms_norm(x, weights.out_norm) @ weights.out_proj
    return o_hat, o_hat, o_hat @ target_weights.lm_head


def independent_forward_batch(weights: IndependentWeights, target_weights, tokens):
    tc = target_weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = tokens.size
    positions = np.arange(t_len)
    mask = make_masks("sa_causal", t_len)
    x = T.embedding(target_weights.token_embed, tokens)
    for lw in weights.layers:
        xn = T.rms_norm(x, lw.attn_norm)
        q = rotary(xn @ lw.wq, positions, tc.head_dim, tc.rope_base)
        k = rotary(xn @ lw.wk, positions, tc.head_dim, tc.rope_base)
        v = xn @ lw.wv
        x = x + (attention(q, k, v, mask, heads=tc.heads, kv_heads=tc.kv_heads) @ lw.wo)
        xn2 = T.rms_norm(x, lw.mlp_norm)
        x = x + (T.silu(xn2 @ lw.w_in) @ lw.w_out)
    o = T.rms_norm(x, weights.final_norm)
    return o, o, o @ target_weights.lm_head


# ---------------------------------------------------------------------------
# probes


def input_independence_probe(layer_fn, queries: np.ndarray, tol: float = 1e-6) -> bool:
    """True iff ``layer_fn`` maps each row independently of the others."""
    if queries.shape[0] < 1:
        raise DimensionError("probe needs at least one query row")
    full = layer_fn(queries)
    for i in range(queries.shape[0]):
        single = layer_fn(queries[i : i + 1])
        if np.max(np.abs(full[i] - single[0])) > tol:
            return False
    return True


def ca_layer_fn(drafter: MoaDrafter, agg_store: np.ndarray):
    """The cross-attention layer as a row-wise map over query streams."""
    blk = drafter.weights.ca
    heads = drafter.config.heads
    ca_k = agg_store @ blk.wk.data
    ca_v = agg_store @ blk.wv.data

    def fn(xs: np.ndarray) -> np.ndarray:
        out = np.empty_like(xs)
        for i, x in enumerate(xs):
            xn = _rms_np(x, blk.norm.data)
            att = _attend_row(xn @ blk.wq.data, ca_k, ca_v, heads)
            y = x + att @ blk.wo.data
            out[i] = _mlp_row(y, blk)
        return out

    return fn


def ca_input_independence_probe(drafter: MoaDrafter, queries: np.ndarray, agg_store: np.ndarray) -> bool:
    return input_independence_probe(ca_layer_fn(drafter, agg_store), queries)
