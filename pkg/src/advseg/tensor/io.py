"""Binary tensor serialization.

Layout: ``b"TNSR"``, version byte, dtype byte (0 = float32, 1 = float64),
ndim byte, ndim little-endian uint32 extents, then the row-major payload as
little-endian scalars. No padding.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .core import Tensor

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    fh.write(MAGIC + bytes([VERSION, code, arr.ndim]))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def read_tensor(fh: BinaryIO, requires_grad: bool = False) -> Tensor:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != MAGIC:
        raise TensorFormatError("missing TNSR header")
    version, code, ndim = head[4], head[5], head[6]
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack(f"<{ndim}I", raw)
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise TensorFormatError("truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True), requires_grad=requires_grad)


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> Tensor:
    buf = io.BytesIO(blob)
    t = read_tensor(buf)
    if buf.read(1):
        raise TensorFormatError("trailing bytes after tensor")
    return t


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
