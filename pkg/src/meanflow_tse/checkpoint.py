"""
Binary parameter container.

Layout (all little-endian)::

    magic      8 bytes
    version    uint32
    hlen       uint32
    header     hlen bytes of UTF-8 JSON: {"meta": {...}, "arrays": [[name, shape], ...]}
    payload    float64 arrays in header order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
VELOCITY_MAGIC = b"MFTSEVN\x00"
MR_MAGIC = b"MFTSEMR\x00"
STATE_MAGIC = b"MFTSEST\x00"


class CheckpointError(ValueError):
    pass


def save(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]):
    """Write atomically: the previous file survives any failure mid-write."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    path = Path(path)
    header = json.dumps(
        {"meta": meta, "arrays": [[k, list(np.shape(v))] for k, v in arrays.items()]},
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    off = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header["meta"], arrays
