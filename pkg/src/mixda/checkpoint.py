"""Binary checkpoint format.

Layout (all integers little-endian unsigned 64-bit)::

    b"MIXDA1"
    u64 snapshot length, UTF-8 config snapshot
    u64 entry count
    per entry, names in lexicographic order:
        u64 name length, UTF-8 name
        u64 rank, rank x u64 extents
        float64 payload (little-endian, C order)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

MAGIC = b"MIXDA1"
_U64 = struct.Struct("<Q")
_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    """Base class; ``code`` distinguishes the failure kind."""

    code = 1


class MagicMismatch(CheckpointError):
    code = 10


class TruncatedCheckpoint(CheckpointError):
    code = 11


class ShapeMismatch(CheckpointError):
    code = 12


class MalformedCheckpoint(CheckpointError):
    code = 13


def dumps(snapshot: str, tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    snap = snapshot.encode("utf-8")
    parts += [_U64.pack(len(snap)), snap, _U64.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts += [_U64.pack(len(raw)), raw, _U64.pack(arr.ndim)]
        parts += [_U64.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedCheckpoint(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    def text(self, what: str) -> str:
        raw = self.take(self.u64(f"{what} length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedCheckpoint(f"{what} is not valid UTF-8") from None


def loads(
    buf: bytes,
    expected_shapes: Callable[[str], Mapping[str, tuple[int, ...]]] | None = None,
) -> tuple[str, dict[str, np.ndarray]]:
    """Parse a checkpoint. Nothing is returned unless the whole file is valid.

    ``expected_shapes`` maps the embedded snapshot to the parameter layout
    it implies; every entry must appear there with the same extents.
    """
    if buf[: len(MAGIC)] != MAGIC:
        raise MagicMismatch(f"bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = len(MAGIC)
    snapshot = r.text("config snapshot")
    count = r.u64("entry count")
    tensors: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        name = r.text("tensor name")
        if prev is not None and name <= prev:
            raise MalformedCheckpoint(f"tensor names not strictly sorted at {name!r}")
        prev = name
        rank = r.u64(f"rank of {name}")
        if rank > 32:
            raise MalformedCheckpoint(f"implausible rank {rank} for {name}")
        shape = tuple(r.u64(f"extents of {name}") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = r.take(8 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(data, dtype=_F64).astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise MalformedCheckpoint(f"{len(buf) - r.pos} trailing bytes after last entry")
    if expected_shapes is not None:
        layout = expected_shapes(snapshot)
        for name, arr in tensors.items():
            if name not in layout:
                raise ShapeMismatch(f"tensor {name!r} is not part of the embedded config")
            if tuple(layout[name]) != arr.shape:
                raise ShapeMismatch(f"tensor {name!r} has shape {arr.shape}, config implies {tuple(layout[name])}")
    return snapshot, tensors


def save(path: str | Path, snapshot: str, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(snapshot, tensors))
    os.replace(tmp, path)


def load(path: str | Path, expected_shapes=None) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    try:
        return loads(buf, expected_shapes)
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}") from None
