"""STLS1: a tiny portable tensor file format.

Layout (little-endian)::

    b"STLS" | version:u16 = 1 | dtype:u8 | ndim:u8 | dims:u32 * ndim | payload

dtype codes: 0 float32, 1 float64, 2 uint8. Payload is row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STLS"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    pass


def encode(arr) -> bytes:
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<HBB", VERSION, _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return head + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("bad magic")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != off + count * dt.itemsize:
        raise FormatError("payload size does not match header")
    arr = np.frombuffer(buf, dtype=dt.newbyteorder("<"), count=count, offset=off)
    return arr.astype(dt).reshape(dims)


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
