"""Portable checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic  b"DRFCKPT\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header:
                {"meta": {...},
                 "tensors": [{"name": str, "shape": [int, ...],
                              "offset": int, "count": int}, ...]}
    rest      float64 little-endian payload; each tensor row-major at
              ``offset`` (counted in elements from the payload start)

Tensors are written in sorted name order and the header uses sorted keys,
so equal contents give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRFCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write ``tensors`` and ``meta`` to ``path``; returns the parameter checksum."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)
    return checksum(tensors)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    payload = np.frombuffer(raw, dtype="<f8", offset=20 + hlen)
    tensors = {}
    for e in header["tensors"]:
        start = e["offset"]
        if start + e["count"] > payload.size:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = payload[start:start + e["count"]].reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]


def checksum(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
