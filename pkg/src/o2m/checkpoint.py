"""Binary checkpoint format; the byte layout is documented in docs/checkpoint.md."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"O2MN"
VERSION = 1


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<ii", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<i", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<i", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}i", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, not a checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<ii")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = take("<i")
        if name_len < 0 or pos + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<i")
        dims = take(f"<{rank}i") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
