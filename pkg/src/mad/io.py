"""Binary tensor container (``.madt``) used for checkpoints and datasets.

Layout (all little-endian)::

    b"MADT" | u8 version=1 | u8 dtype=1 (f64) | u8 ndim | u8 pad | ndim x u64 dims | payload

The payload starts at byte ``8 + 8 * ndim`` and is row-major float64.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"MADT"
VERSION = 1
DTYPE_F64 = 1

__all__ = ["save_array", "load_array", "encode_array", "decode_array"]


def encode_array(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    if a.ndim > 255:
        raise ContractError(f"too many dimensions: {a.ndim}")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F64, a.ndim, 0)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContractError("not a MADT container (bad magic)")
    version, dtype, ndim, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported MADT version {version}")
    if dtype != DTYPE_F64:
        raise ContractError(f"unsupported MADT dtype code {dtype}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    offset = 8 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - offset != 8 * count:
        raise ContractError(
            f"payload size {len(buf) - offset} does not match shape {tuple(shape)}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_array(path: str | os.PathLike, arr) -> None:
    Path(path).write_bytes(encode_array(arr))


def load_array(path: str | os.PathLike) -> np.ndarray:
    return decode_array(Path(path).read_bytes())
