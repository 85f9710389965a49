"""Reader/writer for ``.vtsr`` tensor files.

Layout (all little-endian)::

    bytes 0..7    magic  b"VTSR1\\0\\0\\0"
    bytes 8..11   u32    rank
    bytes 12..15  u32    reserved, always 0
    4 * rank      u32    dims, outermost first
    rest          f32    row-major data
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTSR1\x00\x00\x00"
_HEADER = struct.Struct("<8sII")


class TensorFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")  # not ascontiguousarray: it promotes 0-d to 1-d
    header = _HEADER.pack(MAGIC, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, rank, _ = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    off = _HEADER.size
    if len(blob) < off + 4 * rank:
        raise TensorFormatError(f"truncated shape block for rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - off != 4 * count:
        raise TensorFormatError(f"payload is {len(blob) - off} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
