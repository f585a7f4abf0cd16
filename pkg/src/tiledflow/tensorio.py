"""XLT1 raw-tensor files.

Layout: 8-byte magic "XLT1\\0\\0\\0\\0", little-endian u32 rank, rank
little-endian u32 dimension sizes, then the row-major float32 payload.
Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from os import PathLike

import numpy as np

from .errors import ParseError

MAGIC = b"XLT1\x00\x00\x00\x00"
_MAX_RANK = 32


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim < 1 or array.ndim > _MAX_RANK:
        raise ValueError(f"rank {array.ndim} outside [1, {_MAX_RANK}]")
    header = MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < len(MAGIC):
        raise ParseError("truncated XLT1 header", offset=len(data))
    if data[:8] != MAGIC:
        raise ParseError("bad XLT1 magic", offset=0)
    if len(data) < 12:
        raise ParseError("truncated XLT1 rank field", offset=len(data))
    (rank,) = struct.unpack_from("<I", data, 8)
    if not 1 <= rank <= _MAX_RANK:
        raise ParseError(f"unreasonable XLT1 rank {rank}", offset=8)
    dims_end = 12 + 4 * rank
    if len(data) < dims_end:
        raise ParseError("truncated XLT1 dimension list", offset=len(data))
    shape = struct.unpack_from(f"<{rank}I", data, 12)
    count = 1
    for s in shape:
        count *= s
    expected = dims_end + 4 * count
    if len(data) < expected:
        raise ParseError(
            f"truncated XLT1 payload: need {expected} bytes, have {len(data)}",
            offset=len(data),
        )
    if len(data) > expected:
        raise ParseError("trailing bytes after XLT1 payload", offset=expected)
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=dims_end)
    return flat.reshape(shape).copy()


def write_tensor(path: str | PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def read_tensor(path: str | PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
