"""SPNT tensor container format.

Layout (all integers little-endian)::

    b"SPNT"  u32 version  u32 count
    repeated count times:
        u16 name_length  name (UTF-8)
        u8  rank         u32 extent * rank
        f64 data * prod(extents), row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SPNT"
VERSION = 1


def dumps(tensors):
    """Serialize an ordered name -> array mapping to bytes."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"rank {arr.ndim} too large for tensor {name}")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(buf):
    """Parse bytes produced by :func:`dumps`; preserves tensor order."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated SPNT data while reading {what}", pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, not an SPNT file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported SPNT version {version}", 4)
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(shape)
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor", pos)
    return tensors


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path):
    return loads(Path(path).read_bytes())
