"""CSIT binary tensor files.

Layout (all integers little-endian)::

    offset  size      field
    0       4         magic b"CSIT"
    4       1         version (1)
    5       1         dtype code: 0 = float32, 1 = float64
    6       1         ndim (>= 1)
    7       8 * ndim  extents, uint64, each >= 1
    ...     ...       row-major payload, little-endian IEEE floats

Nothing may follow the payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"CSIT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.float32: 0, np.float64: 1}
HEADER_FIXED = 7
_MAX_BYTES = 2 ** 62


def encode(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    code = DTYPE_CODES.get(arr.dtype.type)
    if code is None:
        raise TypeError(f"CSIT stores float32 or float64, got {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"CSIT tensors need 1..255 dimensions, got {arr.ndim}")
    if min(arr.shape) < 1:
        raise ValueError(f"CSIT extents must be >= 1, got {arr.shape}")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    n = len(buf)
    if n < HEADER_FIXED:
        raise FormatError(f"truncated header: {n} bytes, need at least {HEADER_FIXED}", offset=n)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    if ndim < 1:
        raise FormatError("ndim must be at least 1", offset=6)
    ext_end = HEADER_FIXED + 8 * ndim
    if n < ext_end:
        raise FormatError(f"truncated extents: need {ext_end} header bytes, file has {n}", offset=n)
    shape = struct.unpack_from(f"<{ndim}Q", buf, HEADER_FIXED)
    itemsize = DTYPES[code].itemsize
    count = 1
    for i, e in enumerate(shape):
        if e < 1:
            raise FormatError(f"extent {i} is zero", offset=HEADER_FIXED + 8 * i)
        count *= e
        if count * itemsize > _MAX_BYTES:
            raise FormatError(f"extent overflow at dimension {i}: shape {list(shape)}",
                              offset=HEADER_FIXED + 8 * i)
    expected = count * itemsize
    have = n - ext_end
    if have < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {have}", offset=n)
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", offset=ext_end + expected)
    arr = np.frombuffer(buf, dtype=DTYPES[code], count=count, offset=ext_end)
    return arr.reshape(shape).astype(DTYPES[code].newbyteorder("="), copy=True)


def save_csi_tensor(path: str | os.PathLike, tensor: np.ndarray) -> None:
    data = encode(tensor)
    with open(path, "wb") as fh:
        fh.write(data)


def load_csi_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
