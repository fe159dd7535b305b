"""Little-endian container of named float32 tensors.

Layout::

    b"CAMC" | version u32 (=1) | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | extents u32 * rank | f32 * prod(extents)
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CAMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(value)
        if arr.ndim > 255:
            raise CheckpointError(f"rank {arr.ndim} of {name!r} too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a container; raises :class:`CheckpointError` on any inconsistency."""
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated file: need {n} bytes for {what} at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a CAMC container")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name at offset {pos} is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1, "rank"))
        extents = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = 1
        for e in extents:
            size *= e
        if 4 * size > len(view) - pos:
            raise CheckpointError(
                f"dimension overflow: tensor {name!r} claims {size} values, "
                f"only {(len(view) - pos) // 4} remain"
            )
        data = np.frombuffer(take(4 * size, name), dtype="<f4").reshape(extents)
        out[name] = data.astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return out


def write(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    blob = encode(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
