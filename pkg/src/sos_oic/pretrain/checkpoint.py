"""Versioned checkpoint container.

Layout (little endian)::

    magic "SOSCKPT\\0" | version u32 | meta_len u64 | meta (canonical JSON)
    | n_arrays u32 | per array: name_len u16, name, ndim u8, shape u64*ndim, float32 data
    | sha256 of everything above (32 bytes)

Metadata is serialized with sorted keys and no timestamps, so identical
state always produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"SOSCKPT\x00"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = canonical_json(ckpt.metadata)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        # asarray, not ascontiguousarray: the latter turns 0-d arrays into shape (1,)
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(encoded), arr.ndim))
        parts.append(encoded)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    head = len(MAGIC) + 4
    if len(blob) < head or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if len(blob) < head + _DIGEST or hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified file)")
    try:
        pos = head
        (meta_len,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        metadata = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n_arrays,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(n_arrays):
            name_len, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint body: {exc}") from None
    if pos != len(body):
        raise CorruptCheckpoint("trailing bytes after the last array")
    return Checkpoint(arrays, metadata)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
