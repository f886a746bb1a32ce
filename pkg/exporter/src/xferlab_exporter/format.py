"""Writer for the downstream toolkit's feature-file and manifest formats.

Implemented independently against the published byte layout (magic 'SGFT',
version 1, f32 payload, trailing CRC32 of the payload) so conformance of
emitted files is checked by the consumer, not shared code.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SGFT"
VERSION = 1
DTYPE_F32 = 0
MODALITY_CODE = {"acoustic": 0, "text": 1}


def write_feature_file(
    path: str | Path,
    dialogue_id: str,
    utterance_index: int,
    modality: str,
    block_index: int,
    data: np.ndarray,
) -> int:
    """Write one (T, D) float32 tensor; returns the payload CRC32.

    The write is atomic (temp file + rename) so a crashed export never
    leaves a truncated file behind.
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected (T>=1, D>=1) matrix, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {dialogue_id}/u{utterance_index}")
    t, d = arr.shape
    id_bytes = dialogue_id.encode("utf-8")
    payload = arr.tobytes(order="C")
    checksum = zlib.crc32(payload) & 0xFFFFFFFF
    blob = b"".join(
        [
            struct.pack(
                "<4sHBBHIII",
                MAGIC,
                VERSION,
                DTYPE_F32,
                MODALITY_CODE[modality],
                block_index,
                t,
                d,
                utterance_index,
            ),
            struct.pack("<H", len(id_bytes)),
            id_bytes,
            payload,
            struct.pack("<I", checksum),
        ]
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return checksum


def write_manifest(
    path: str | Path,
    corpus_id: str,
    task: str,
    dialogues: list[dict],
) -> None:
    """Write a corpus manifest; ``dialogues`` entries carry dialogue_id,
    split, num_utterances, label, feature_refs."""
    payload = {"corpus_id": corpus_id, "task": task, "dialogues": dialogues}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
