"""Versioned binary weight containers.

Layout: magic (4 bytes), u32 version, u32 header length, JSON header, then
raw little-endian float32 tensor data in the header's declared order.
Target files use magic ``SDLW``; drafter files use ``SDLD`` and store the
shared token-embedding / lm-head tensors by reference hash of the target
checkpoint instead of duplicating them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC_TARGET = b"SDLW"
MAGIC_DRAFTER = b"SDLD"
VERSION = 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write(path, magic: bytes, header: dict, named: list[tuple[str, Tensor]]):
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(t.data.shape)} for n, t in named]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for _, t in named:
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read(path, magic: bytes):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    offset = 12 + hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[spec["name"]] = np.array(arr)  # decouple from the read-only buffer
        offset += 4 * count
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, tensors


def save_target(path, weights) -> str:
    _write(path, MAGIC_TARGET, {"config": weights.config.to_dict()}, weights.named_tensors())
    return file_sha256(path)


def load_target(path):
    from .target import LayerWeights, ModelConfig, ModelWeights

    header, tensors = _read(path, MAGIC_TARGET)
    cfg = ModelConfig(**header["config"])
    layers = []
    for i in range(cfg.layers):
        layers.append(
            LayerWeights(
                **{
                    f: Tensor(tensors[f"layers.{i}.{f}"], requires_grad=True)
                    for f in LayerWeights.FIELDS
                }
            )
        )
    return ModelWeights(
        config=cfg,
        token_embed=Tensor(tensors["token_embed"], requires_grad=True),
        layers=layers,
        final_norm=Tensor(tensors["final_norm"], requires_grad=True),
        lm_head=Tensor(tensors["lm_head"], requires_grad=True),
    )


def save_drafter(path, named: list[tuple[str, Tensor]], meta: dict, target_ref: str) -> str:
    """``meta`` carries the drafter config; shared tensors are excluded and
    referenced through ``target_ref`` (sha256 of the target checkpoint)."""
    header = {"meta": meta, "target_ref": target_ref}
    _write(path, MAGIC_DRAFTER, header, named)
    return file_sha256(path)


def load_drafter(path, target_ref: str):
    """Returns (meta, {name: array}); refuses a mismatched target reference."""
    header, tensors = _read(path, MAGIC_DRAFTER)
    if header["target_ref"] != target_ref:
        raise CheckpointError(
            f"{path}: drafter was distilled against target {header['target_ref'][:12]}..., "
            f"got {target_ref[:12]}..."
        )
    return header["meta"], tensors
