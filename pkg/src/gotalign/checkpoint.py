"""Versioned binary checkpoints: named float64 blobs plus a metadata header.

Layout (all integers little-endian):
    8 bytes   magic "GALNCKP1"
    u32       format version (currently 1)
    u32       metadata length, then that many bytes of UTF-8 JSON
    u32       blob count, then per blob:
                  u16 name length, name UTF-8,
                  u32 rows, u32 cols,
                  rows*cols little-endian float64 values

Roundtrips are bit-exact; loads verify magic, version, and an optional
expected config hash stored in the metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .numerics import Matrix

MAGIC = b"GALNCKP1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path, blobs: dict[str, Matrix], meta: dict) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype=np.float64)
        if arr.ndim != 2:
            raise CheckpointError(f"blob {name!r} is not a matrix: shape {arr.shape}")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        parts.append(arr.astype("<f8").tobytes())
    path.write_bytes(b"".join(parts))


def load(path, expect_config_hash: str | None = None) -> tuple[dict[str, Matrix], dict]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 12)
    offset = 16
    meta = json.loads(bytes(view[offset:offset + meta_len]).decode())
    offset += meta_len
    if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
        raise CheckpointError(
            f"{path}: checkpoint was written for config {meta.get('config_hash')}, "
            f"expected {expect_config_hash}"
        )
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    blobs: dict[str, Matrix] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode()
        offset += name_len
        rows, cols = struct.unpack_from("<II", raw, offset)
        offset += 8
        nbytes = rows * cols * 8
        arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=offset)
        blobs[name] = arr.reshape(rows, cols).astype(np.float64, copy=True)
        offset += nbytes
    return blobs, meta
