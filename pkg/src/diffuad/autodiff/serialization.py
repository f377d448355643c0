"""The ``UADT`` tensor file layout.

``UADT`` magic, ``u16`` version, ``u16`` rank, ``u32`` per extent, then
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"UADT"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.array(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    fh.write(MAGIC)
    fh.write(struct.pack("<HH", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor data while reading {what}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<HH", _read_exact(fh, 4, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(fh, 4 * count, "values")
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path: Union[str, Path], array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
