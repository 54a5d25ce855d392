"""Little-endian binary container for named float64 tensors.

Layout::

    magic (8 bytes) | version u32 | step u64 | config length u32 | config JSON
    | tensor count u32 | per tensor: name length u32, UTF-8 name, rank u32,
      dims u64 * rank, values f64 * prod(dims) | crc32 u32 of everything before

The same encoding, with a different magic, serialises episodes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"DKFCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    version: int = FORMAT_VERSION


def encode(tensors: Mapping[str, np.ndarray], config: dict | None = None, step: int = 0,
           magic: bytes = CHECKPOINT_MAGIC, version: int = FORMAT_VERSION) -> bytes:
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<IQI", version, step, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"file truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, magic: bytes = CHECKPOINT_MAGIC, version: int = FORMAT_VERSION) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(magic)) != magic:
        raise CheckpointCorruptError("bad magic bytes")
    (found,) = r.unpack("<I")
    if found != version:
        raise CheckpointVersionError(f"format version {found} is not supported (expected {version})")
    if len(buf) < 4 or struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise CheckpointCorruptError("checksum mismatch (truncated or corrupted file)")
    step, cfg_len = r.unpack("<QI")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable config block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf) - 4:
        raise CheckpointCorruptError(f"{len(buf) - 4 - r.pos} trailing bytes after tensor block")
    return Checkpoint(tensors, config, step, found)


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config: dict | None = None, step: int = 0) -> None:
    write_atomic(path, encode({k: np.asarray(v) for k, v in tensors.items()}, config, step))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
