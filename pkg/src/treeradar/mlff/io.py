"""MLFW weight files.

Layout (little-endian): magic ``MLFW1``, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 ndim, u32 per dim, float32 data.  Tensors
are written in sorted-name order so equal parameter sets give equal bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from treeradar.core import atomic_write

MLFW_MAGIC = b"MLFW1"


class WeightFormatError(ValueError):
    pass


def encode_weights(params: dict) -> bytes:
    parts = [MLFW_MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> dict:
    view = memoryview(buf)
    pos = len(MLFW_MAGIC)
    if bytes(view[:pos]) != MLFW_MAGIC:
        raise WeightFormatError("not an MLFW file")

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError("truncated MLFW file")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        out[name] = data.astype(np.float64)
    if pos != len(view):
        raise WeightFormatError("trailing bytes after MLFW payload")
    return out


def save_weights(path, params: dict) -> None:
    atomic_write(path, encode_weights(params))


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
