"""Versioned named-block container for weights on disk and on the wire.

Layout: magic "CTB1", little-endian u32 version, u64 header length, a JSON
header listing blocks as {name, shape} in order plus free-form metadata, then
each block's float64 values little-endian in C order. Checkpoints and
federated parameter payloads share these exact bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CTB1"
VERSION = 1


def encode_blocks(blocks: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize named f64 arrays; block order follows dict insertion order."""
    header = {
        "version": VERSION,
        "meta": meta or {},
        "blocks": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in blocks.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(head)), head]
    for name, arr in blocks.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        out.append(a.tobytes())
    return b"".join(out)


def decode_blocks(payload: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if payload[:4] != MAGIC:
        raise ValueError("bad block container magic")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != VERSION:
        raise ValueError(f"unsupported block container version {version}")
    (head_len,) = struct.unpack_from("<Q", payload, 8)
    head_end = 16 + head_len
    header = json.loads(payload[16:head_end].decode("utf-8"))
    blocks: dict[str, np.ndarray] = {}
    offset = head_end
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(payload):
            raise ValueError("block container truncated")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape)
        blocks[entry["name"]] = arr.astype(np.float64)
        offset = end
    if offset != len(payload):
        raise ValueError("trailing bytes after final block")
    return blocks, header["meta"]


def write_blocks(path: str, blocks: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_blocks(blocks, meta))


def read_blocks(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode_blocks(fh.read())


def scalar_count(blocks: dict[str, np.ndarray]) -> int:
    return int(sum(arr.size for arr in blocks.values()))
