"""Flat binary parameter checkpoints.

Layout (all integers little-endian uint32)::

    b"IEDP1"
    repeated: name_len, name bytes (utf-8), rank, extents[rank], float32 payload
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"IEDP1"


class CheckpointError(IOError):
    pass


def save(path, arrays):
    """Write ``{name: array}`` records in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad header")
    out = {}
    pos = len(MAGIC)
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            if name in out:
                raise CheckpointError(f"{path}: duplicate record {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
