"""Run configuration: one JSON document, schema-validated, with
dotted-path command-line overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULT_CONFIG: dict = {
    "model": {
        "vocab_size": 256,
        "layers": 8,
        "embed": 64,
        "kv_embed": 16,
        "heads": 4,
        "mlp_hidden": 256,
        "max_seq": 512,
        "eos_token": 0,
        "rope_base": 10000.0,
    },
    "drafters": [
        {"variant": "moa", "n": 0},
        {"variant": "moa", "n": 1},
        {"variant": "moa", "n": 3},
        {"variant": "eagle", "n": 0},
        {"variant": "independent", "n": 0},
    ],
    "drafter_dims": {
        "heads": 2,
        "lsa_kv": 16,
        "lsa_mlp": 96,
        "sa_kv": 16,
        "sa_mlp": 64,
        "ca_kv": 16,
        "ca_mlp": 112,
    },
    "tree": {"breadth": 8, "depth": 6, "budget": 62},
    "chain_k": 4,
    "loss": {"kl_weight": 0.1, "l1_weight": 1.0, "smooth_l1_beta": 1.0},
    "training": {
        "target_steps": 3000,
        "target_lr": 0.001,
        "target_batch": 8,
        "drafter_steps": 1500,
        "drafter_lr": 0.001,
        "drafter_batch": 8,
        "clip_norm": 1.0,
        "k_min": 5,
        "k_max": 15,
        "corpus_sequences": 4000,
        "seq_len": 48,
        "prompt_len": 8,
        "heldout_sequences": 16,
    },
    "bench": {"prompts": 200, "prompt_len": 8, "max_new": 40, "mode": "chain"},
    "simulate": {"prompts": 20, "max_new": 30, "profile": "4g", "disconnect_after": None},
    "network_profiles": {},
    "seeds": {"corpus": 11, "target": 22, "drafter": 33, "bench": 44, "network": 55},
    "out_dir": "runs/default",
}

_SCHEMA: dict = {
    "model": {
        "vocab_size": int,
        "layers": int,
        "embed": int,
        "kv_embed": int,
        "heads": int,
        "mlp_hidden": int,
        "max_seq": int,
        "eos_token": int,
        "rope_base": (int, float),
    },
    "drafters": [
        {
            "variant": str,
            "n": int,
            "use_lsa": bool,
            "use_layer_embedding": bool,
            "eagle_noise": (int, float),
            "independent_layers": int,
        }
    ],
    "drafter_dims": {
        "heads": int,
        "lsa_kv": int,
        "lsa_mlp": int,
        "sa_kv": int,
        "sa_mlp": int,
        "ca_kv": int,
        "ca_mlp": int,
    },
    "tree": {"breadth": int, "depth": int, "budget": int},
    "chain_k": int,
    "loss": {"kl_weight": (int, float), "l1_weight": (int, float), "smooth_l1_beta": (int, float)},
    "training": {
        "target_steps": int,
        "target_lr": (int, float),
        "target_batch": int,
        "drafter_steps": int,
        "drafter_lr": (int, float),
        "drafter_batch": int,
        "clip_norm": (int, float),
        "k_min": int,
        "k_max": int,
        "corpus_sequences": int,
        "seq_len": int,
        "prompt_len": int,
        "heldout_sequences": int,
    },
    "bench": {"prompts": int, "prompt_len": int, "max_new": int, "mode": str},
    "simulate": {"prompts": int, "max_new": int, "profile": str, "disconnect_after": (int, type(None))},
    "network_profiles": {
        "*": {
            "delay_mean_ms": (int, float),
            "delay_std_ms": (int, float),
            "drop_prob": (int, float),
            "bandwidth_bits_per_s": (int, float, type(None)),
        }
    },
    "seeds": {"corpus": int, "target": int, "drafter": int, "bench": int, "network": int},
    "out_dir": str,
}


def _check(node, schema, path: str):
    if isinstance(schema, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path or 'config'}: expected an object, got {type(node).__name__}")
        wildcard = schema.get("*")
        for key, value in node.items():
            sub = schema.get(key, wildcard)
            if sub is None:
                raise ConfigError(f"{path or 'config'}: unknown key {key!r}")
            _check(value, sub, f"{path}.{key}" if path else key)
        return
    if isinstance(schema, list):
        if not isinstance(node, list):
            raise ConfigError(f"{path}: expected a list")
        for i, item in enumerate(node):
            _check(item, schema[0], f"{path}[{i}]")
        return
    if isinstance(node, bool) and schema is int:
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(node, schema):
        want = getattr(schema, "__name__", schema)
        raise ConfigError(f"{path}: expected {want}, got {type(node).__name__}")


def _invariants(cfg: dict):
    if cfg["loss"]["kl_weight"] < 0 or cfg["loss"]["l1_weight"] < 0:
        raise ConfigError("loss: weights must be non-negative")
    if cfg["loss"]["kl_weight"] == 0 and cfg["loss"]["l1_weight"] == 0:
        raise ConfigError("loss: at least one weight must be positive")
    tree = cfg["tree"]
    if tree["breadth"] < 1 or tree["depth"] < 1 or tree["budget"] < tree["breadth"]:
        raise ConfigError("tree: need breadth, depth >= 1 and budget >= breadth")
    tr = cfg["training"]
    if not 1 <= tr["k_min"] <= tr["k_max"]:
        raise ConfigError("training: need 1 <= k_min <= k_max")
    if tr["prompt_len"] >= tr["seq_len"]:
        raise ConfigError("training: prompt_len must be smaller than seq_len")
    for d in cfg["drafters"]:
        if d.get("variant") not in ("moa", "eagle", "independent"):
            raise ConfigError(f"drafters: unknown variant {d.get('variant')!r}")
        if not 0 <= d.get("n", 0) <= cfg["model"]["layers"] - 1:
            raise ConfigError(f"drafters: n={d.get('n')} outside [0, layers-1]")


def validate_config(cfg: dict) -> dict:
    _check(cfg, _SCHEMA, "")
    merged = copy.deepcopy(DEFAULT_CONFIG)
    _merge(merged, cfg)
    _check(merged, _SCHEMA, "")
    _invariants(merged)
    return merged


def _merge(base: dict, extra: dict):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    """Load, merge with defaults, apply dotted-path overrides, validate."""
    cfg: dict = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    merged = validate_config(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like path.to.key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _apply_override(merged, dotted.split("."), value, dotted)
    _check(merged, _SCHEMA, "")
    _invariants(merged)
    return merged


def _apply_override(node, keys: list[str], value, dotted: str):
    for key in keys[:-1]:
        if isinstance(node, list):
            node = node[int(key)]
        elif key in node:
            node = node[key]
        else:
            raise ConfigError(f"override {dotted!r}: unknown key {key!r}")
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value  # unknown keys are caught by the final schema pass
