"""Drafter training against a frozen target.

The objective couples a reverse KL between the drafter's and the target's
next-token distributions with a smooth-L1 penalty on the predicted
activation stream, averaged over response positions only.  Cross-attention
visibility during training is limited by sampled K-step break points so
the drafter practices exactly the information pattern it will face while
drafting between verifications; the frozen top layers replay with the same
segmenting (verified rows seen as ground truth, in-segment rows through
the drafter's own drafted columns).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import make_masks
from .drafters import (
    Drafter,
    eagle_forward_batch,
    independent_forward_batch,
    lsa_aggregate,
    moa_forward_batch,
)
from .errors import ConfigError, TrainingError
from .optim import Adam
from .target import forward_batch
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class LossWeights:
    kl_weight: float = 0.1
    l1_weight: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.kl_weight < 0 or self.l1_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.kl_weight == 0 and self.l1_weight == 0:
            raise ConfigError("at least one loss weight must be positive")


def sample_ca_breaks(rng: np.random.Generator, prompt_len: int, seq_len: int, k_range=(5, 15)):
    """Strictly increasing break points partitioning the response into
    segments of Uniform{k_range} lengths."""
    lo, hi = k_range
    if lo < 1:
        raise ConfigError(f"k_range minimum must be >= 1, got {lo}")
    breaks = []
    point = prompt_len
    while True:
        point = point + int(rng.integers(lo, hi + 1))
        if point >= seq_len:
            break
        breaks.append(point)
    return breaks


@dataclass
class TeacherData:
    """Frozen per-sequence target quantities consumed by distillation."""

    tokens: np.ndarray
    prompt_len: int
    kv_block: np.ndarray  # (T, L, 2*E_kv)
    taps: np.ndarray  # (L+1, T, E); slot L is the lm-head input
    logits: np.ndarray  # (T, V)
    frozen_kv: dict  # layer -> (keys, values)


def build_teacher_data(target_weights, tokens: np.ndarray, prompt_len: int) -> TeacherData:
    cfg = target_weights.config
    res = forward_batch(target_weights, tokens)
    t_len = len(tokens)
    kv_block = np.empty((t_len, cfg.layers, 2 * cfg.kv_embed), dtype=np.float32)
    frozen = {}
    for l in range(cfg.layers):
        k = res.keys[l].data
        v = res.values[l].data
        kv_block[:, l, : cfg.kv_embed] = k
        kv_block[:, l, cfg.kv_embed :] = v
        frozen[l] = (k, v)
    taps = np.stack([t.data for t in res.taps], axis=0)
    return TeacherData(
        tokens=np.asarray(tokens, dtype=np.int64),
        prompt_len=prompt_len,
        kv_block=kv_block,
        taps=taps,
        logits=res.logits.data,
        frozen_kv=frozen,
    )


def tap_rows(teacher: TeacherData, offset: int) -> np.ndarray:
    layers = teacher.taps.shape[0] - 1
    return teacher.taps[layers - offset]


def distill_loss(o_hat, o_target: np.ndarray, logits, target_logits: np.ndarray, weights: LossWeights):
    """lambda_kl * KL[drafter || target] + lambda_l1 * SmoothL1(o_hat - o),
    both averaged over the given (response) rows."""
    logp_target = _log_softmax_rows(target_logits)
    kl = T.reverse_kl(logits, logp_target)
    if not np.all(np.isfinite(kl.data)):
        bad = int(np.flatnonzero(~np.isfinite(kl.data))[0])
        raise TrainingError(f"non-finite distillation loss at position {bad}")
    loss = T.scale(T.mean(kl), weights.kl_weight)
    if weights.l1_weight:
        l1 = T.mean(T.smooth_l1(o_hat, o_target, beta=weights.smooth_l1_beta))
        if not np.isfinite(l1.item()):
            raise TrainingError("non-finite smooth-l1 term")
        loss = loss + T.scale(l1, weights.l1_weight)
    return loss


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def drafter_train_forward(
    drafter: Drafter,
    teacher: TeacherData,
    breaks: list[int],
    noise_rng: np.random.Generator | None = None,
):
    """One teacher-forced forward of the drafter over a full sequence.
    Returns (o_hat rows, logits rows) as tape tensors covering all rows."""
    cfg = drafter.config
    tokens = teacher.tokens
    t_len = len(tokens)
    if cfg.variant == "eagle":
        o_hat, _, logits = eagle_forward_batch(
            drafter.weights, drafter.target, tokens, tap_rows(teacher, 0), noise_rng=noise_rng
        )
        return o_hat, logits
    if cfg.variant == "independent":
        o_hat, _, logits = independent_forward_batch(drafter.weights, drafter.target, tokens)
        return o_hat, logits
    ca_mask = make_masks("ca_kstep", t_len, prompt_len=teacher.prompt_len, break_points=breaks)
    if cfg.use_lsa:
        source = lsa_aggregate(drafter.weights, teacher.kv_block)
    else:
        source = Tensor(tap_rows(teacher, 0))
    frozen_gt = None
    gt_mask = None
    hat_mask = None
    if cfg.n:
        tc = drafter.target.config
        frozen_gt = [teacher.frozen_kv[l] for l in range(tc.layers - cfg.n, tc.layers)]
        gt_mask = ca_mask.allowed
        hat_mask = np.tril(np.ones((t_len, t_len), dtype=bool)) & ~ca_mask.allowed
    o_hat, _, logits = moa_forward_batch(
        drafter.weights,
        drafter.target,
        tokens,
        source,
        ca_mask,
        frozen_gt=frozen_gt,
        gt_mask=gt_mask,
        hat_mask=hat_mask,
    )
    return o_hat, logits


def sequence_loss(drafter: Drafter, teacher: TeacherData, breaks, loss_weights: LossWeights, noise_rng=None):
    """Distillation loss over the response rows of one sequence."""
    cfg = drafter.config
    t_len = len(teacher.tokens)
    lo, hi = teacher.prompt_len - 1, t_len - 1
    o_hat, logits = drafter_train_forward(drafter, teacher, breaks, noise_rng=noise_rng)
    tap_offset = cfg.n if cfg.variant == "moa" else 0
    o_target = tap_rows(teacher, tap_offset)[lo:hi]
    lw = loss_weights
    if cfg.variant == "independent" and lw.l1_weight != 0:
        lw = LossWeights(lw.kl_weight, 0.0, lw.smooth_l1_beta)
    return distill_loss(
        T.rows(o_hat, lo, hi),
        o_target,
        T.rows(logits, lo, hi),
        teacher.logits[lo:hi],
        lw,
    )


@dataclass
class DistillSettings:
    steps: int = 1500
    lr: float = 1e-3
    batch_size: int = 8
    clip_norm: float = 1.0
    k_range: tuple = (5, 15)
    loss: LossWeights = field(default_factory=LossWeights)
    log_every: int = 100


def train_drafter(
    drafter: Drafter,
    corpus: list[np.ndarray],
    prompt_len: int,
    settings: DistillSettings,
    seed: int,
    heldout: list[np.ndarray] | None = None,
    teacher_cache: dict | None = None,
):
    """Distill one drafter against its frozen target.

    Teacher quantities are precomputed once per sequence (training never
    generates from either model); pass a shared ``teacher_cache`` dict to
    reuse them across variants trained against the same target and corpus.
    Returns (step, train, eval) rows.
    """
    rng = np.random.default_rng(seed)
    target_sum_before = drafter.target.checksum()
    params = drafter.weights.trainable()
    opt = Adam(params, lr=settings.lr, clip_norm=settings.clip_norm)
    cache: dict[int, TeacherData] = teacher_cache if teacher_cache is not None else {}
    held_teachers = [build_teacher_data(drafter.target, seq, prompt_len) for seq in (heldout or [])]

    def teacher_for(i: int) -> TeacherData:
        if i not in cache:
            cache[i] = build_teacher_data(drafter.target, corpus[i], prompt_len)
        return cache[i]

    def eval_loss() -> float:
        if not held_teachers:
            return float("nan")
        ev_rng = np.random.default_rng(seed ^ 0xEA11)
        tot = 0.0
        for td in held_teachers:
            breaks = sample_ca_breaks(ev_rng, td.prompt_len, len(td.tokens), settings.k_range)
            tot += sequence_loss(drafter, td, breaks, settings.loss).item()
        return tot / len(held_teachers)

    curve = []
    noise_rng = np.random.default_rng(seed ^ 0x0153) if drafter.config.eagle_noise else None
    for step in range(settings.steps):
        idx = rng.integers(0, len(corpus), size=settings.batch_size)
        with GradTape() as tape:
            losses = []
            for i in idx:
                td = teacher_for(int(i))
                breaks = sample_ca_breaks(rng, td.prompt_len, len(td.tokens), settings.k_range)
                losses.append(sequence_loss(drafter, td, breaks, settings.loss, noise_rng))
            loss = T.scale(sum(losses[1:], losses[0]), 1.0 / settings.batch_size)
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingError("drafter training diverged", step=step)
        grads = backward(loss, tape)
        opt.step(grads)
        if step % settings.log_every == 0 or step == settings.steps - 1:
            curve.append((step, val, eval_loss()))
    if drafter.target.checksum() != target_sum_before:
        raise TrainingError("frozen target weights changed during distillation")
    return curve
