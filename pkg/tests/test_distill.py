import math

import numpy as np
import pytest

from helpers import fd_gradcheck
from specdec import corpus
from specdec.attention import make_masks
from specdec.distill import (
    DistillSettings,
    LossWeights,
    build_teacher_data,
    distill_loss,
    sample_ca_breaks,
    sequence_loss,
    tap_rows,
    train_drafter,
)
from specdec.drafters import DrafterConfig, build_drafter, init_drafter_weights
from specdec.errors import ConfigError, TrainingError
from specdec.target import LayerWeights, ModelConfig, ModelWeights, init_model
from specdec.tensor import GradTape, Tensor, backward
from specdec import tensor as T

MICRO = ModelConfig(vocab_size=11, layers=2, embed=8, kv_embed=4, heads=2, mlp_hidden=16, max_seq=64)


def micro_drafter_cfg(variant="moa", n=0, **kw):
    base = dict(heads=2, lsa_kv=4, lsa_mlp=8, sa_kv=4, sa_mlp=8, ca_kv=4, ca_mlp=8)
    base.update(kw)
    return DrafterConfig(variant=variant, n=n, **base)


@pytest.fixture(scope="module")
def micro_target():
    return init_model(MICRO, seed=2)


class TestSampleBreaks:
    def test_fixed_gap_example(self):
        class FixedRng:
            def __init__(self, gaps):
                self.gaps = list(gaps)

            def integers(self, lo, hi):
                return self.gaps.pop(0)

        breaks = sample_ca_breaks(FixedRng([4, 3, 99]), prompt_len=3, seq_len=11)
        assert breaks == [7, 10]

    def test_deterministic(self):
        a = sample_ca_breaks(np.random.default_rng(5), 4, 60)
        b = sample_ca_breaks(np.random.default_rng(5), 4, 60)
        assert a == b
        assert all(x2 > x1 for x1, x2 in zip(a, a[1:]))
        assert all(x >= 4 for x in a)

    def test_single_token_response(self):
        assert sample_ca_breaks(np.random.default_rng(0), 5, 6) == []

    def test_bad_range(self):
        with pytest.raises(ConfigError):
            sample_ca_breaks(np.random.default_rng(0), 3, 10, k_range=(0, 5))


class TestDistillLoss:
    def test_zero_at_global_minimum(self):
        rng = np.random.default_rng(0)
        o = rng.standard_normal((4, 8)).astype(np.float32)
        logits = rng.standard_normal((4, 11)).astype(np.float32)
        loss = distill_loss(Tensor(o), o, Tensor(logits), logits, LossWeights())
        assert abs(loss.item()) <= 1e-9

    def test_smooth_l1_piecewise(self):
        o_hat = Tensor(np.array([[2.0]], dtype=np.float32))
        o = np.array([[0.0]], dtype=np.float32)
        logits = np.zeros((1, 3), dtype=np.float32)
        loss = distill_loss(o_hat, o, Tensor(logits), logits, LossWeights(0.0, 1.0, 1.0))
        assert math.isclose(loss.item(), 1.5, rel_tol=1e-6)

    def test_reverse_kl_closed_form(self):
        logits = Tensor(np.zeros((1, 2), dtype=np.float32))
        target = np.log(np.array([[0.25, 0.75]], dtype=np.float32))
        loss = distill_loss(Tensor(np.zeros((1, 1), np.float32)), np.zeros((1, 1), np.float32), logits, target, LossWeights(1.0, 0.0))
        want = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert math.isclose(loss.item(), want, rel_tol=1e-5)

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(0.0, 0.0)
        with pytest.raises(ConfigError):
            LossWeights(-1.0, 1.0)


class TestMaskCorrectness:
    def test_training_mask_matches_golden_mask(self):
        # positions in segment i see aggregated columns only up to break i-1
        t_len, prompt = 20, 4
        breaks = [9, 16]
        mask = make_masks("ca_kstep", t_len, prompt_len=prompt, break_points=breaks)
        for i in range(t_len):
            bound = max([prompt] + [b for b in breaks if b <= i])
            want = np.zeros(t_len, dtype=bool)
            want[:bound] = True
            assert np.array_equal(mask.allowed[i], want)

    def test_on_policy_structural_check(self):
        # the training-time visible set equals the inference-time visible
        # set after the corresponding verification history
        t_len, prompt = 20, 4
        breaks = [9, 16]
        mask = make_masks("ca_kstep", t_len, prompt_len=prompt, break_points=breaks)
        # replay: verification events land exactly at the break points
        verified = prompt
        events = list(breaks) + [t_len]
        for i in range(prompt, t_len):
            while events and i >= events[0]:
                verified = events.pop(0)
            visible = set(np.flatnonzero(mask.allowed[i]))
            assert visible == set(range(verified)), f"row {i}"


class TestTrainDrafter:
    @pytest.mark.parametrize("variant,n", [("moa", 1), ("eagle", 0), ("independent", 0)])
    def test_zero_lr_keeps_weights(self, micro_target, variant, n):
        cfg = micro_drafter_cfg(variant, n)
        w = init_drafter_weights(cfg, MICRO, 7)
        d = build_drafter(cfg, w, micro_target)
        seqs = corpus.make_corpus(MICRO.vocab_size, 6, 14, seed=1)
        before = [t.data.copy() for _, t in w.named_tensors()]
        train_drafter(d, seqs, prompt_len=4, settings=DistillSettings(steps=2, lr=0.0, batch_size=2, k_range=(2, 4)), seed=0)
        for (name, t), b in zip(w.named_tensors(), before):
            assert np.array_equal(t.data, b), name

    def test_frozen_target_unchanged(self, micro_target):
        cfg = micro_drafter_cfg("moa", 1)
        w = init_drafter_weights(cfg, MICRO, 8)
        d = build_drafter(cfg, w, micro_target)
        seqs = corpus.make_corpus(MICRO.vocab_size, 6, 14, seed=2)
        before = micro_target.checksum()
        train_drafter(d, seqs, prompt_len=4, settings=DistillSettings(steps=4, lr=1e-3, batch_size=2, k_range=(2, 4)), seed=0)
        assert micro_target.checksum() == before

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_heldout_loss_halves(self, seed):
        tcfg = ModelConfig(vocab_size=32, layers=3, embed=32, kv_embed=16, heads=2, mlp_hidden=64, max_seq=64)
        tw = init_model(tcfg, seed=seed)
        from specdec.target import train_target

        tr = corpus.make_corpus(tcfg.vocab_size, 300, 28, seed=seed)
        train_target(tw, tr, steps=300, lr=2e-3, batch_size=4, seed=seed)
        cfg = DrafterConfig(variant="moa", n=0, heads=2, lsa_kv=8, lsa_mlp=32, sa_kv=8, sa_mlp=32, ca_kv=8, ca_mlp=32)
        w = init_drafter_weights(cfg, tcfg, seed + 10)
        d = build_drafter(cfg, w, tw)
        held = corpus.make_corpus(tcfg.vocab_size, 6, 28, seed=seed + 77)
        curve = train_drafter(
            d, tr[:150], prompt_len=6,
            settings=DistillSettings(steps=400, lr=2e-3, batch_size=4, k_range=(3, 8), log_every=100),
            seed=seed, heldout=held,
        )
        assert curve[-1][2] < 0.5 * curve[0][2], curve


def cast_model64(weights: ModelWeights) -> ModelWeights:
    def c(t):
        return Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad)

    return ModelWeights(
        config=weights.config,
        token_embed=c(weights.token_embed),
        layers=[
            LayerWeights(**{f: c(getattr(lw, f)) for f in LayerWeights.FIELDS}) for lw in weights.layers
        ],
        final_norm=c(weights.final_norm),
        lm_head=c(weights.lm_head),
    )


def cast_drafter64(weights):
    import dataclasses

    from specdec.drafters import Block

    def c(t):
        return Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad)

    def cast_obj(obj):
        if isinstance(obj, Tensor):
            return c(obj)
        if isinstance(obj, Block):
            return Block(**{f: c(getattr(obj, f)) for f in Block.FIELDS})
        if isinstance(obj, LayerWeights):
            return LayerWeights(**{f: c(getattr(obj, f)) for f in LayerWeights.FIELDS})
        if isinstance(obj, list):
            return [cast_obj(x) for x in obj]
        return obj

    kw = {}
    for f in dataclasses.fields(weights):
        kw[f.name] = cast_obj(getattr(weights, f.name))
    return type(weights)(**kw)


class TestGradientCorrectness:
    """Central finite differences over every trainable tensor, micro config."""

    @pytest.mark.parametrize("variant,n", [("moa", 0), ("moa", 1), ("eagle", 0), ("independent", 0)])
    def test_fd_all_trainables(self, micro_target, variant, n):
        rng = np.random.default_rng(hash((variant, n)) % 2**31)
        target64 = cast_model64(micro_target)
        cfg = micro_drafter_cfg(variant, n)
        w64 = cast_drafter64(init_drafter_weights(cfg, MICRO, 9))
        d = build_drafter(cfg, w64, target64)
        seq = corpus.make_corpus(MICRO.vocab_size, 1, 12, seed=3)[0]
        teacher = build_teacher_data(target64, seq, prompt_len=4)
        breaks = [7, 10]
        lw = LossWeights(0.3, 0.7 if variant != "independent" else 0.0)

        def build():
            return sequence_loss(d, teacher, breaks, lw)

        fd_gradcheck(build, w64.trainable(), eps=1e-4, rtol=1e-4, max_elems=6, rng=rng)

    def test_fd_lsa_ablation_path(self, micro_target):
        rng = np.random.default_rng(4)
        target64 = cast_model64(micro_target)
        cfg = micro_drafter_cfg("moa", 1, use_lsa=False)
        w64 = cast_drafter64(init_drafter_weights(cfg, MICRO, 10))
        d = build_drafter(cfg, w64, target64)
        seq = corpus.make_corpus(MICRO.vocab_size, 1, 12, seed=5)[0]
        teacher = build_teacher_data(target64, seq, prompt_len=4)

        def build():
            return sequence_loss(d, teacher, [8], LossWeights(0.5, 0.5))

        fd_gradcheck(build, w64.trainable(), eps=1e-4, rtol=1e-4, max_elems=6, rng=rng)

    def test_fd_target_training_path(self, micro_target):
        rng = np.random.default_rng(6)
        target64 = cast_model64(micro_target)
        seq = corpus.make_corpus(MICRO.vocab_size, 1, 10, seed=6)[0]

        def build():
            from specdec.target import forward_batch

            res = forward_batch(target64, seq)
            return T.cross_entropy(T.rows(res.logits, 0, len(seq) - 1), seq[1:])

        fd_gradcheck(build, target64.trainable(), eps=1e-4, rtol=1e-4, max_elems=4, rng=rng)
