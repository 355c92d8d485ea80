"""FDT1 portable tensor files.

Layout: ASCII magic ``FDT1``, little-endian u32 rank, ``rank`` little-endian
u32 dims, then the values as little-endian float32 in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"FDT1"


class FormatError(ValueError):
    pass


def dumps(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != 4 * count:
        raise FormatError(f"payload has {len(buf) - offset} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def save(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as f:
        f.write(dumps(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return loads(f.read())
