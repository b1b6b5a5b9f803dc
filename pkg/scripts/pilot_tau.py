"""Pilot for the acceptance-length trend: train the toy target once, distill
every drafter variant with one budget, bench chain drafting, print the tau
table.  Iterated offline to pin the recipe the acceptance suite uses."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from specdec import checkpoint, corpus
from specdec.distill import DistillSettings, LossWeights, train_drafter
from specdec.drafters import DrafterConfig, build_drafter, init_drafter_weights
from specdec.speculation import ChainMode, MetricsLog, run_episode
from specdec.target import ModelConfig, init_model, train_target

TARGET_CKPT = Path("/tmp/pilot_target.sdlw")
TARGET_STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 2500
DRAFTER_STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 800
SEED = int(sys.argv[3]) if len(sys.argv) > 3 else 0

cfg = ModelConfig()
tr_corpus = corpus.make_corpus(cfg.vocab_size, 3000, 48, seed=11)
held = corpus.make_corpus(cfg.vocab_size, 12, 48, seed=11 ^ 0x7E57)

if TARGET_CKPT.exists():
    target = checkpoint.load_target(TARGET_CKPT)
    print("loaded cached target")
else:
    target = init_model(cfg, seed=22)
    t0 = time.time()
    curve = train_target(target, tr_corpus, steps=TARGET_STEPS, lr=1e-3, batch_size=8, seed=22, heldout=held, log_every=500)
    print(f"target trained in {time.time()-t0:.0f}s; eval: {[round(c[2],3) for c in curve]}")
    checkpoint.save_target(TARGET_CKPT, target)

prompts = corpus.make_prompts(cfg.vocab_size, 60, 8, seed=44)
teacher_cache = {}
entries = [
    ("moa", 0, True),
    ("moa", 1, True),
    ("moa", 3, True),
    ("eagle", 0, True),
    ("moa", 0, False),
]
results = {}
for variant, n, use_lsa in entries:
    dcfg = DrafterConfig(variant=variant, n=n, use_lsa=use_lsa)
    w = init_drafter_weights(dcfg, cfg, seed=33 + SEED)
    d = build_drafter(dcfg, w, target)
    t0 = time.time()
    curve = train_drafter(
        d, tr_corpus, prompt_len=8,
        settings=DistillSettings(steps=DRAFTER_STEPS, lr=1e-3, batch_size=8, log_every=DRAFTER_STEPS // 4),
        seed=100 + SEED, heldout=held, teacher_cache=teacher_cache,
    )
    train_s = time.time() - t0
    metrics = MetricsLog()
    t0 = time.time()
    for prompt in prompts:
        run_episode(target, d, prompt, ChainMode(4), max_new=40, metrics=metrics)
        if metrics.cycles >= 600:
            break
    tag = f"{variant}_n{n}" + ("" if use_lsa else "_nolsa")
    results[tag] = metrics.tau_accept
    print(
        f"{tag:14s} tau_accept={metrics.tau_accept:.3f} tau_per_call={metrics.tau_per_call:.3f} "
        f"cycles={metrics.cycles} train={train_s:.0f}s bench={time.time()-t0:.0f}s "
        f"loss_curve={[round(c[2],3) for c in curve]}"
    )

print()
print("trend: moa_n0 > eagle:", results["moa_n0"] > results["eagle_n0"])
print("trend: moa_n1 >= moa_n0 - 0.05:", results["moa_n1"] >= results["moa_n0"] - 0.05)
print("trend: moa_n3 >= moa_n1 - 0.05:", results["moa_n3"] >= results["moa_n1"] - 0.05)
print("trend: nolsa <= moa_n0 + 0.05:", results["moa_n0_nolsa"] <= results["moa_n0"] + 0.05)
