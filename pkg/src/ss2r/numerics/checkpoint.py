"""Binary tensor checkpoints.

Layout (all integers little-endian u32)::

    file    := count record*
    record  := name_len name_utf8 tensor
    tensor  := b"SS2RTENS" rank dim* float32_le payload (row-major)
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"SS2RTENS"


class CheckpointError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(buf: io.BufferedIOBase) -> np.ndarray:
    magic = buf.read(8)
    if magic != MAGIC:
        raise CheckpointError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read(buf, 4))
    dims = struct.unpack(f"<{rank}I", _read(buf, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read(buf, 4 * count), dtype="<f4").reshape(dims)
    return data.astype(np.float32)


def _read(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, object]) -> None:
    """Write named tensors; records are emitted in sorted-name order.

    The file is written to a temporary sibling first and renamed, so a crash
    never leaves a half-written checkpoint behind.
    """
    path = Path(path)
    out = io.BytesIO()
    names = sorted(tensors)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(encode_tensor(tensors[name]))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(out.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", _read(fh, 4))
        result = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, n).decode("utf-8")
            if name in result:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            result[name] = decode_tensor(fh)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last record")
    return result
