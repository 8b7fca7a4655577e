"""Binary container for named float64 tensors plus a metadata map.

Layout (all integers little-endian)::

    b"AFDC"                    magic
    u32 version                currently 1
    u32 n_tensors
    n_tensors x {
        u32 name_len, name (utf-8)
        u32 rank, u64 dims[rank]
        f64 payload[prod(dims)] little-endian, row-major
    }
    u32 meta_len, meta (utf-8 JSON object, sorted keys)

Used for both model checkpoints and scene datasets.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch

MAGIC = b"AFDC"
VERSION = 1


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    meta_raw = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_raw)))
    parts.append(meta_raw)
    return b"".join(parts)


def loads(buf: bytes):
    """Inverse of :func:`dumps`; returns ``(tensors, meta)``."""
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointMismatch("not an AFDC container (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointMismatch("truncated container")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointMismatch(f"container version {version}, expected {VERSION}")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        nbytes = 8 * n
        if pos + nbytes > len(view):
            raise CheckpointMismatch("truncated payload")
        arr = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").reshape(dims).astype(np.float64)
        pos += nbytes
        tensors[name] = arr
    (meta_len,) = take("<I")
    meta = json.loads(bytes(view[pos : pos + meta_len]).decode("utf-8"))
    pos += meta_len
    if pos != len(view):
        raise CheckpointMismatch("trailing bytes after container")
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None) -> str:
    """Write a container and return its sha256 hex digest."""
    data = dumps(tensors, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    return loads(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
