"""Flat binary checkpoints.

Layout (little-endian): magic ``SALW``, version u32, tensor count u32, then
per tensor: name length u32, UTF-8 name, rank u32, extents as u64, f64 values.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SALW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after offset {pos}")
    return out


def save(path, tensors):
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
