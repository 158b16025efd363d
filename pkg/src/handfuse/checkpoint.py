"""CADP parameter checkpoints.

Layout, all integers little-endian::

    b"CADP"  u32 version  u32 config_len  config (UTF-8 JSON)
    u32 count
    count x { u32 name_len  name (UTF-8)  u32 rank  rank x u64 dim  float32[prod(dims)] }

The config block carries the architecture and hyperparameters so a
checkpoint is self-describing.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CADP"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise FormatError(f"not a CADP checkpoint (magic {buf[:4]!r})")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = json.loads(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint arrays")
    return arrays, config


def save(path, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, config))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)


def digest(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and float32 bytes, independent of the config block."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()
