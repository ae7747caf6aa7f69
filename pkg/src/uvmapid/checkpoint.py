"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"UVID"                      magic
    u32  format version
    u32  metadata length N
    N    bytes of UTF-8 JSON metadata
    u32  tensor count
    per tensor:
        u32  name length, name bytes (UTF-8)
        u32  rank, rank x u32 dims
        prod(dims) x float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError

MAGIC = b"UVID"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", ckpt.version, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, expected_version: int = FORMAT_VERSION) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != expected_version:
        raise CheckpointVersionError(version, expected_version)
    try:
        metadata = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata block") from exc
    tensors = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{path}: bad tensor name") from exc
        rank = r.u32()
        if rank > 8:
            raise CorruptCheckpointError(f"{path}: implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(tensors, metadata, version)
