"""RVT1 binary tensor files.

Layout: b"RVT1", u8 ndim, ndim × u32 little-endian dims, row-major f32 LE payload.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"RVT1"


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr) -> bytes:
    a = np.array(arr, dtype="<f4", order="C", copy=True)
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    import io

    return read_tensor(io.BytesIO(buf))


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor file: wanted {n} bytes, got {len(buf)}")
    return buf
