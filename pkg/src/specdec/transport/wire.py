"""Byte-exact wire frames and 8-bit activation quantization.

Message layouts (all little-endian):

* DRAFT     ``[u8 1][u8 M]`` then M nodes of 3-byte token id + 1-byte
  parent index (255 marks a root-level node): the body is exactly 4M bytes.
* VERIFY    ``[u8 2][u8 A]`` then A 3-byte tokens (accepted plus the bonus)
  followed by the per-variant quantized activation payload.
* BOOTSTRAP ``[u8 3][u32 raw_len]`` then the gzip stream of the 3-byte
  first token plus the quantized full-prompt payload.
* ACK       ``[u8 4][u8 seq]``.

Quantized blocks are stored as a float32 scale followed by int8 values;
the pre-quantization element counts per message follow the accounting
4M (up) and 3A + {2 A E_kv (N+1) | A E | 0} (down) for the mixture /
activation-baseline / independent variants.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError

MSG_DRAFT = 1
MSG_VERIFY = 2
MSG_BOOTSTRAP = 3
MSG_ACK = 4

ROOT_PARENT = 255


@dataclass(frozen=True)
class QuantizedTensor:
    scale: float
    values: np.ndarray  # int8
    shape: tuple

    def nbytes(self) -> int:
        return 4 + self.values.size


def quantize8(arr: np.ndarray) -> QuantizedTensor:
    """Symmetric absmax int8 quantization, rounding half away from zero."""
    arr = np.asarray(arr, dtype=np.float32)
    absmax = float(np.max(np.abs(arr))) if arr.size else 0.0
    if absmax == 0.0:
        return QuantizedTensor(0.0, np.zeros(arr.size, dtype=np.int8), arr.shape)
    scale = absmax / 127.0
    r = arr.astype(np.float64).reshape(-1) / scale
    q = np.sign(r) * np.floor(np.abs(r) + 0.5)
    return QuantizedTensor(scale, np.clip(q, -127, 127).astype(np.int8), arr.shape)


def dequantize8(qt: QuantizedTensor) -> np.ndarray:
    return (qt.values.astype(np.float32) * np.float32(qt.scale)).reshape(qt.shape)


def _pack_block(arr: np.ndarray) -> bytes:
    qt = quantize8(arr)
    return struct.pack("<f", qt.scale) + qt.values.tobytes()


def _unpack_block(buf: bytes, offset: int, count: int) -> tuple[np.ndarray, int]:
    (scale,) = struct.unpack_from("<f", buf, offset)
    offset += 4
    vals = np.frombuffer(buf, dtype=np.int8, count=count, offset=offset)
    offset += count
    return vals.astype(np.float32) * np.float32(scale), offset


def _pack_token(tok: int) -> bytes:
    if not 0 <= tok < 1 << 24:
        raise ProtocolError(f"token id {tok} does not fit in 3 bytes")
    return struct.pack("<I", tok)[:3]


def _read_token(buf: bytes, offset: int) -> tuple[int, int]:
    return int.from_bytes(buf[offset : offset + 3], "little"), offset + 3


# ---------------------------------------------------------------------------
# DRAFT


def encode_draft(tokens: list[int], parents: list[int]) -> bytes:
    if len(tokens) > 255:
        raise ProtocolError(f"draft of {len(tokens)} nodes exceeds the 255-node frame limit")
    out = [struct.pack("<BB", MSG_DRAFT, len(tokens))]
    for tok, par in zip(tokens, parents):
        if par != -1 and not 0 <= par < ROOT_PARENT:
            raise ProtocolError(f"parent index {par} does not fit in one byte")
        out.append(_pack_token(int(tok)))
        out.append(struct.pack("<B", ROOT_PARENT if par == -1 else par))
    return b"".join(out)


def decode_draft(buf: bytes) -> tuple[list[int], list[int]]:
    if len(buf) < 2 or buf[0] != MSG_DRAFT:
        raise ProtocolError("not a draft frame")
    count = buf[1]
    if len(buf) != 2 + 4 * count:
        raise ProtocolError(f"draft frame of {len(buf)} bytes, expected {2 + 4 * count}")
    tokens, parents = [], []
    offset = 2
    for _ in range(count):
        tok, offset = _read_token(buf, offset)
        par = buf[offset]
        offset += 1
        tokens.append(tok)
        parents.append(-1 if par == ROOT_PARENT else par)
    return tokens, parents


# ---------------------------------------------------------------------------
# VERIFY / BOOTSTRAP payloads


def payload_elements(payload: list[list[np.ndarray]]) -> int:
    return sum(int(np.asarray(block).size) for row in payload for block in row)


def expected_verify_elements(variant: str, n: int, count: int, kv_embed: int, embed: int) -> int:
    """Activation element counts per message: mixture 2*A*E_kv*(N+1);
    activation baseline A*E; independent 0."""
    if variant == "moa":
        return 2 * count * kv_embed * (n + 1)
    if variant == "eagle":
        return count * embed
    return 0


def _encode_payload(payload: list[list[np.ndarray]]) -> bytes:
    return b"".join(_pack_block(block) for row in payload for block in row)


def _decode_payload(buf: bytes, offset: int, count: int, block_sizes: list[int]):
    rows = []
    for _ in range(count):
        row = []
        for size in block_sizes:
            vals, offset = _unpack_block(buf, offset, size)
            row.append(vals)
        rows.append(row)
    return rows, offset


def _block_sizes(variant: str, n: int, kv_embed: int, embed: int, use_lsa: bool = True) -> list[int]:
    if variant == "moa":
        if use_lsa:
            return [2 * kv_embed] + [2 * kv_embed] * n
        return [embed] + [2 * kv_embed] * n
    if variant == "eagle":
        return [embed]
    return []


def encode_verify(tokens: list[int], payload: list[list[np.ndarray]]) -> bytes:
    """``tokens``: accepted tokens plus the bonus; ``payload``: one row of
    activation blocks per newly verified position."""
    if len(tokens) > 255:
        raise ProtocolError("verify frame limited to 255 tokens")
    out = [struct.pack("<BB", MSG_VERIFY, len(tokens))]
    out += [_pack_token(int(t)) for t in tokens]
    out.append(_encode_payload(payload))
    return b"".join(out)


def decode_verify(buf: bytes, variant: str, n: int, kv_embed: int, embed: int, use_lsa: bool = True):
    if len(buf) < 2 or buf[0] != MSG_VERIFY:
        raise ProtocolError("not a verify frame")
    count = buf[1]
    offset = 2
    tokens = []
    for _ in range(count):
        tok, offset = _read_token(buf, offset)
        tokens.append(tok)
    sizes = _block_sizes(variant, n, kv_embed, embed, use_lsa)
    # one activation row per newly verified position: the previously pending
    # token plus each accepted one - the same count as the token list
    payload, offset = _decode_payload(buf, offset, count, sizes)
    if offset != len(buf):
        raise ProtocolError(f"verify frame has {len(buf) - offset} trailing bytes")
    return tokens, payload


def encode_bootstrap(first_token: int, payload: list[list[np.ndarray]]) -> bytes:
    """Prompt bootstrap: gzip of [first token, quantized prompt payload]."""
    if not payload and first_token is None:
        raise ProtocolError("bootstrap requires a prompt forward")
    raw = _pack_token(int(first_token)) + _encode_payload(payload)
    comp = gzip.compress(raw, mtime=0)
    return struct.pack("<BI", MSG_BOOTSTRAP, len(raw)) + comp


def decode_bootstrap(buf: bytes, count: int, variant: str, n: int, kv_embed: int, embed: int, use_lsa: bool = True):
    if len(buf) < 5 or buf[0] != MSG_BOOTSTRAP:
        raise ProtocolError("not a bootstrap frame")
    (raw_len,) = struct.unpack_from("<I", buf, 1)
    raw = gzip.decompress(buf[5:])
    if len(raw) != raw_len:
        raise ProtocolError(f"bootstrap raw length {len(raw)} != declared {raw_len}")
    first, offset = _read_token(raw, 0)
    payload, offset = _decode_payload(raw, offset, count, _block_sizes(variant, n, kv_embed, embed, use_lsa))
    if offset != len(raw):
        raise ProtocolError("bootstrap payload has trailing bytes")
    return first, payload


def encode_ack(seq: int) -> bytes:
    return struct.pack("<BB", MSG_ACK, seq & 0xFF)


def decode_ack(buf: bytes) -> int:
    if len(buf) != 2 or buf[0] != MSG_ACK:
        raise ProtocolError("not an ack frame")
    return buf[1]
