"""Reader/writer for the ``OGT1`` binary tensor format.

Layout: 4-byte magic ``b"OGT1"``, little-endian u32 rank, ``rank`` u32 dims,
then the float32 payload in row-major (C) order, little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"OGT1"


class TensorFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{source}: bad magic, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError(f"{source}: truncated header (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise TensorFormatError(
            f"{source}: payload has {len(blob) - offset} bytes, dims {dims} need {4 * count}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=offset, count=count).reshape(dims).copy()


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(array))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), source=str(path))
