"""Pipeline orchestration shared by the CLI and the acceptance suite:
corpus construction, target training, distillation of every drafter
variant, single-device benchmarking and client-server simulation."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import checkpoint, corpus
from .config import DEFAULT_CONFIG
from .distill import DistillSettings, LossWeights, train_drafter
from .drafters import DrafterConfig, build_drafter, init_drafter_weights
from .errors import CheckpointError, ConfigError
from .speculation import ChainMode, MetricsLog, TreeMode, run_episode
from .target import GreedySampler, ModelConfig, init_model, train_target
from .transport.netsim import BUILTIN_PROFILES, NetworkProfile
from .transport.session import run_session

log = logging.getLogger("specdec")


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def drafter_config_from(cfg: dict, entry: dict) -> DrafterConfig:
    kwargs = dict(cfg["drafter_dims"])
    kwargs.update(entry)
    variant = kwargs.get("variant", "moa")
    if variant == "eagle" and kwargs.get("n", 0) != 0:
        log.info("the activation-baseline drafter always targets the lm-head input; forcing n=0")
        kwargs["n"] = 0
    return DrafterConfig(**kwargs)


def drafter_tag(dcfg: DrafterConfig) -> str:
    tag = f"{dcfg.variant}_n{dcfg.n}"
    if dcfg.variant == "moa" and not dcfg.use_lsa:
        tag += "_nolsa"
    return tag


def target_path(cfg: dict) -> Path:
    return Path(cfg["out_dir"]) / "target.sdlw"


def drafter_path(cfg: dict, dcfg: DrafterConfig) -> Path:
    return Path(cfg["out_dir"]) / f"drafter_{drafter_tag(dcfg)}.sdld"


def build_corpus(cfg: dict) -> list[np.ndarray]:
    tr = cfg["training"]
    return corpus.make_corpus(
        cfg["model"]["vocab_size"], tr["corpus_sequences"], tr["seq_len"], cfg["seeds"]["corpus"]
    )


def build_heldout(cfg: dict) -> list[np.ndarray]:
    tr = cfg["training"]
    return corpus.make_corpus(
        cfg["model"]["vocab_size"], tr["heldout_sequences"], tr["seq_len"], cfg["seeds"]["corpus"] ^ 0x7E57
    )


def bench_prompts(cfg: dict) -> list[np.ndarray]:
    b = cfg["bench"]
    return corpus.make_prompts(
        cfg["model"]["vocab_size"], b["prompts"], b["prompt_len"], cfg["seeds"]["bench"]
    )


def _write_curve(path: Path, curve):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "train_loss", "eval_loss"])
        writer.writerows(curve)


def cmd_train_target(cfg: dict) -> Path:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    mc = model_config_from(cfg)
    weights = init_model(mc, cfg["seeds"]["target"])
    tr = cfg["training"]
    curve = train_target(
        weights,
        build_corpus(cfg),
        steps=tr["target_steps"],
        lr=tr["target_lr"],
        batch_size=tr["target_batch"],
        seed=cfg["seeds"]["target"],
        heldout=build_heldout(cfg),
    )
    path = target_path(cfg)
    checkpoint.save_target(path, weights)
    _write_curve(out_dir / "target_loss.csv", curve)
    log.info("target checkpoint written to %s", path)
    return path


def load_target_checkpoint(cfg: dict):
    path = target_path(cfg)
    if not path.exists():
        raise CheckpointError(f"target checkpoint missing: {path}; run train-target first")
    return checkpoint.load_target(path), checkpoint.file_sha256(path)


def cmd_distill(cfg: dict, entry: dict) -> Path:
    target_weights, target_hash = load_target_checkpoint(cfg)
    dcfg = drafter_config_from(cfg, entry)
    weights = init_drafter_weights(dcfg, target_weights.config, cfg["seeds"]["drafter"])
    drafter = build_drafter(dcfg, weights, target_weights)
    tr = cfg["training"]
    loss_cfg = cfg["loss"]
    settings = DistillSettings(
        steps=tr["drafter_steps"],
        lr=tr["drafter_lr"],
        batch_size=tr["drafter_batch"],
        clip_norm=tr["clip_norm"],
        k_range=(tr["k_min"], tr["k_max"]),
        loss=LossWeights(loss_cfg["kl_weight"], loss_cfg["l1_weight"], loss_cfg["smooth_l1_beta"]),
    )
    curve = train_drafter(
        drafter,
        build_corpus(cfg),
        prompt_len=tr["prompt_len"],
        settings=settings,
        seed=cfg["seeds"]["drafter"],
        heldout=build_heldout(cfg),
    )
    path = drafter_path(cfg, dcfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_drafter(path, weights.named_tensors(), {"drafter": dcfg.to_dict()}, target_hash)
    _write_curve(path.with_suffix(".loss.csv"), curve)
    log.info("drafter checkpoint written to %s", path)
    return path


def load_drafter_checkpoint(cfg: dict, entry: dict, target_weights, target_hash: str):
    dcfg = drafter_config_from(cfg, entry)
    path = drafter_path(cfg, dcfg)
    if not path.exists():
        raise CheckpointError(f"drafter checkpoint missing: {path}; run distill first")
    meta, arrays = checkpoint.load_drafter(path, target_hash)
    stored = DrafterConfig(**meta["drafter"])
    weights = init_drafter_weights(stored, target_weights.config, seed=0)
    for name, tensor in weights.named_tensors():
        tensor.data[...] = arrays[name]
    return build_drafter(stored, weights, target_weights)


def bench_mode(cfg: dict):
    if cfg["bench"]["mode"] == "chain":
        return ChainMode(cfg["chain_k"])
    if cfg["bench"]["mode"] == "tree":
        t = cfg["tree"]
        return TreeMode(t["breadth"], t["depth"], t["budget"])
    raise ConfigError(f"bench.mode must be 'chain' or 'tree', got {cfg['bench']['mode']!r}")


def cmd_bench(cfg: dict) -> dict:
    target_weights, target_hash = load_target_checkpoint(cfg)
    prompts = bench_prompts(cfg)
    mode = bench_mode(cfg)
    out_dir = Path(cfg["out_dir"]) / "bench"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in cfg["drafters"]:
        drafter = load_drafter_checkpoint(cfg, entry, target_weights, target_hash)
        metrics = MetricsLog()
        for prompt in prompts:
            run_episode(
                target_weights, drafter, prompt, mode, max_new=cfg["bench"]["max_new"], metrics=metrics
            )
        tag = drafter_tag(drafter.config)
        metrics.write_jsonl(out_dir / f"{tag}.jsonl")
        summary = metrics.summary()
        rows.append(
            {
                "variant": drafter.config.variant,
                "n": drafter.config.n,
                "use_lsa": drafter.config.use_lsa,
                "tag": tag,
                "cycles": metrics.cycles,
                "tau_accept": summary["tau_accept"],
                "tau_per_call": summary["tau_per_call"],
                "target_calls": summary["calls"],
                "tokens": summary["tokens"],
            }
        )
        log.info("bench %-16s tau_accept=%.3f tau_per_call=%.3f", tag, summary["tau_accept"], summary["tau_per_call"])
    report = {"mode": cfg["bench"]["mode"], "rows": rows}
    (out_dir / "summary.json").write_text(json.dumps(report, indent=2))
    with open(out_dir / "summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return report


def resolve_profile(cfg: dict, name: str) -> NetworkProfile:
    if name in cfg.get("network_profiles", {}):
        p = cfg["network_profiles"][name]
        return NetworkProfile(
            name,
            p["delay_mean_ms"],
            p["delay_std_ms"],
            p["drop_prob"],
            p.get("bandwidth_bits_per_s"),
        )
    if name in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[name]
    raise ConfigError(f"unknown network profile {name!r}")


def cmd_simulate(cfg: dict, profile_name: str | None = None, disconnect_after: int | None = None) -> dict:
    target_weights, target_hash = load_target_checkpoint(cfg)
    sim = cfg["simulate"]
    profile = resolve_profile(cfg, profile_name or sim["profile"])
    cut = disconnect_after if disconnect_after is not None else sim["disconnect_after"]
    t = cfg["tree"]
    mode = TreeMode(t["breadth"], t["depth"], t["budget"])
    prompts = corpus.make_prompts(
        cfg["model"]["vocab_size"], sim["prompts"], cfg["bench"]["prompt_len"], cfg["seeds"]["bench"] ^ 0x51
    )
    out_dir = Path(cfg["out_dir"]) / "simulate"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in cfg["drafters"]:
        drafter = load_drafter_checkpoint(cfg, entry, target_weights, target_hash)
        tag = drafter_tag(drafter.config)
        transcripts = []
        totals = {"bytes_up": 0, "bytes_down": 0, "calls": 0, "tokens": 0, "virtual_ms": 0.0, "continuation": 0}
        for i, prompt in enumerate(prompts):
            tokens, m = run_session(
                target_weights,
                drafter,
                prompt,
                mode,
                max_new=sim["max_new"],
                profile=profile,
                network_seed=cfg["seeds"]["network"] + i,
                disconnect_after=cut,
            )
            transcripts.append(
                {
                    "prompt": i,
                    "tokens": [int(x) for x in tokens],
                    "cut_point": m.cut_point,
                    "continuation_len": m.continuation_len,
                    "bytes_up": m.bytes_up,
                    "bytes_down": m.bytes_down,
                    "calls": m.target_calls,
                    "virtual_ms": m.virtual_time_ms,
                    "overhead_ms_per_token": m.overhead_ms_per_token(),
                }
            )
            totals["bytes_up"] += m.bytes_up
            totals["bytes_down"] += m.bytes_down
            totals["calls"] += m.target_calls
            totals["tokens"] += m.committed
            totals["virtual_ms"] += m.virtual_time_ms
            totals["continuation"] += m.continuation_len
        with open(out_dir / f"{tag}.jsonl", "w") as f:
            for rec in transcripts:
                f.write(json.dumps(rec) + "\n")
        count = len(prompts)
        rows.append(
            {
                "variant": drafter.config.variant,
                "n": drafter.config.n,
                "tag": tag,
                "profile": profile.name,
                "disconnect_after": cut,
                "mean_bytes_up": totals["bytes_up"] / count,
                "mean_bytes_down": totals["bytes_down"] / count,
                "mean_calls": totals["calls"] / count,
                "mean_continuation_len": totals["continuation"] / count,
                "overhead_ms_per_token": totals["virtual_ms"] / max(1, totals["tokens"]),
            }
        )
        log.info(
            "simulate %-16s bytes_down/prompt=%.0f calls/prompt=%.1f",
            tag,
            rows[-1]["mean_bytes_down"],
            rows[-1]["mean_calls"],
        )
    report = {"profile": profile.name, "disconnect_after": cut, "rows": rows}
    (out_dir / "summary.json").write_text(json.dumps(report, indent=2))
    return report


def cmd_generate(cfg: dict, entry: dict, prompt_tokens: list[int], mode_name: str) -> dict:
    target_weights, target_hash = load_target_checkpoint(cfg)
    drafter = load_drafter_checkpoint(cfg, entry, target_weights, target_hash)
    mode = (
        ChainMode(cfg["chain_k"])
        if mode_name == "chain"
        else TreeMode(cfg["tree"]["breadth"], cfg["tree"]["depth"], cfg["tree"]["budget"])
    )
    prompt = np.asarray(prompt_tokens, dtype=np.int64)
    tokens, metrics = run_episode(target_weights, drafter, prompt, mode, max_new=cfg["bench"]["max_new"])
    return {
        "prompt": [int(t) for t in prompt],
        "tokens": [int(t) for t in tokens],
        "metrics": metrics.summary(),
    }
