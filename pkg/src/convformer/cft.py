"""Binary tensor container.

Layout: the magic bytes ``CFT1``, one unsigned byte with the rank, ``rank``
little-endian u32 dimensions, then the payload as little-endian float32 in
row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DataError

MAGIC = b"CFT1"


def write_cft(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise DataError("CFT rank is limited to 255")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated CFT block: wanted {n} bytes, got {len(buf)}")
    return buf


def read_cft(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise DataError(f"bad CFT magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").astype(np.float32)
    return data.reshape(dims)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_cft(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_cft(fh)
