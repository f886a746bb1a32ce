"""Versioned binary parameter checkpoints.

Layout (little-endian): magic 'SGCK' | u16 version=1 | u32 param count |
per param: u16 name length + UTF-8 name | u32 rows | u32 cols | f32
payload row-major | trailing u32 CRC32 over all payloads in file order.
Weights are stored as f32 regardless of in-memory precision.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor2

MAGIC = b"SGCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(params: dict[str, Tensor2 | np.ndarray], path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    crc = 0
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor2) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise CheckpointError(f"{name}: checkpoint stores 2-D arrays, got {data.shape}")
        name_bytes = name.encode("utf-8")
        payload = data.tobytes(order="C")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<II", data.shape[0], data.shape[1]))
        chunks.append(payload)
        crc = zlib.crc32(payload, crc)
    chunks.append(struct.pack("<I", crc & 0xFFFFFFFF))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 10
    out: dict[str, np.ndarray] = {}
    crc = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            rows, cols = struct.unpack_from("<II", blob, offset)
            offset += 8
            payload = blob[offset : offset + rows * cols * 4]
            if len(payload) != rows * cols * 4:
                raise CheckpointError(f"{path}: truncated payload for {name}")
            offset += rows * cols * 4
            crc = zlib.crc32(payload, crc)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if len(blob) != offset + 4:
        raise CheckpointError(f"{path}: trailing bytes after parameter table")
    (stored,) = struct.unpack_from("<I", blob, offset)
    if stored != (crc & 0xFFFFFFFF):
        raise CheckpointError(f"{path}: checksum mismatch")
    return out


def apply_checkpoint(params: dict[str, Tensor2], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing named parameter dict, by name."""
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}"
        )
    for name, p in params.items():
        if tuple(loaded[name].shape) != p.shape:
            raise CheckpointError(
                f"{name}: shape {loaded[name].shape} != expected {p.shape}"
            )
        p.data = loaded[name].astype(p.dtype)
        p.grad = None
