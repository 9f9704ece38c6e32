"""PFT1 portable tensor files.

Layout: ASCII magic ``PFT1``, little-endian uint32 rank, ``rank`` uint32
dims, then the float32 little-endian payload in row-major order.
"""
from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"PFT1"


class PFTError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise PFTError("bad magic: not a PFT1 file")
    if len(blob) < 8:
        raise PFTError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise PFTError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) != head + 4 * count:
        raise PFTError(f"payload holds {(len(blob) - head) // 4} floats, dims {dims} need {count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=head).reshape(dims).astype(np.float32)


def save(path, arr):
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
