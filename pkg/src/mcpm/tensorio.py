"""MPTD v1 tensor files.

Layout: magic ``4D 50 54 44 01``, one ``u8`` rank, ``rank`` little-endian
``u32`` extents, then the row-major little-endian float64 payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MPTD\x01"


class FormatError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(data: bytes) -> np.ndarray:
    arr, used = _parse(data, 0)
    if used != len(data):
        raise FormatError(f"{len(data) - used} trailing bytes after tensor payload")
    return arr


def _parse(data: bytes, offset: int):
    if data[offset:offset + 5] != MAGIC:
        raise FormatError("bad magic; not an MPTD v1 tensor")
    offset += 5
    if len(data) < offset + 1:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<B", data, offset)
    offset += 1
    if len(data) < offset + 4 * rank:
        raise FormatError("truncated shape")
    shape = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = 8 * count
    if len(data) < offset + nbytes:
        raise FormatError("truncated payload")
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
    return arr.astype(np.float64), offset + nbytes


def read_at(data: bytes, offset: int) -> np.ndarray:
    """Parse one tensor starting at ``offset`` inside a larger buffer."""
    return _parse(data, offset)[0]


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
