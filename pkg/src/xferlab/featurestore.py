"""On-disk interchange format for per-utterance features and corpus manifests.

Feature files hold one dense float32 matrix per (dialogue, utterance,
modality, block) and are produced either by this package's synthetic
generator or by an external exporter. The binary layout (little-endian):

    magic 'SGFT' | u16 version=1 | u8 dtype (0=f32) | u8 modality
    (0=acoustic, 1=text) | u16 block_index | u32 T | u32 D
    | u32 utterance_index | u16 len + UTF-8 dialogue_id
    | payload T*D*4 bytes row-major | u32 CRC32(payload)

A manifest is one JSON document per corpus binding dialogues, splits,
labels, and feature-file references. Because features come from a separate
component, every read is checksum-verified and ``validate_manifest``
cross-checks manifests against the files they reference.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SGFT"
FORMAT_VERSION = 1
DTYPE_F32 = 0

MODALITIES = ("acoustic", "text")
_MODALITY_CODE = {"acoustic": 0, "text": 1}
_MODALITY_NAME = {code: name for name, code in _MODALITY_CODE.items()}

TASKS = ("ad", "depression")
SPLITS = ("train", "validation", "test")

DEFAULT_SEVERITY_RANGE = (0.0, 24.0)

_HEADER = struct.Struct("<4sHBBHIII")  # magic..utterance_index


class FeatureFileError(Exception):
    """Base class for feature-file format errors."""


class BadMagicError(FeatureFileError):
    pass


class UnsupportedVersionError(FeatureFileError):
    pass


class UnsupportedDtypeError(FeatureFileError):
    pass


class InvalidHeaderError(FeatureFileError):
    """Header fields are structurally valid but semantically wrong
    (unknown modality code, zero dims, undecodable dialogue id)."""


class LengthMismatchError(FeatureFileError):
    """Payload length disagrees with the dims declared in the header,
    including truncated or over-long files."""


class ChecksumMismatchError(FeatureFileError):
    pass


class NonFiniteDataError(FeatureFileError):
    """Tensor data contains NaN or Inf (rejected on write and on read)."""


@dataclass
class FeatureTensor:
    """Features of one utterance for one modality and one block.

    ``data`` has shape (T, D): T frames (acoustic) or tokens (text), D
    hidden dims. ``block_index`` 0 is the pre-encoder output; 1..B are
    encoder block outputs.
    """

    dialogue_id: str
    utterance_index: int
    modality: str
    block_index: int
    data: np.ndarray

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.utterance_index < 0:
            raise ValueError("utterance_index must be >= 0")
        if not 0 <= self.block_index <= 0xFFFF:
            raise ValueError(f"block_index {self.block_index} out of range")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"data must be a (T>=1, D>=1) matrix, got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ValueError(f"dtype must be float32, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteDataError(
                f"non-finite entries in {self.dialogue_id}/u{self.utterance_index}"
            )


def write_feature_file(tensor: FeatureTensor, path: str | Path) -> int:
    """Write ``tensor`` to ``path``; returns the CRC32 of the payload.

    The tensor is validated first: non-finite data is rejected before any
    bytes are written.
    """
    tensor.validate()
    data = np.ascontiguousarray(tensor.data, dtype=np.float32)
    t, d = data.shape
    id_bytes = tensor.dialogue_id.encode("utf-8")
    if len(id_bytes) > 0xFFFF:
        raise ValueError("dialogue_id too long")
    payload = data.tobytes(order="C")
    checksum = zlib.crc32(payload) & 0xFFFFFFFF
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        DTYPE_F32,
        _MODALITY_CODE[tensor.modality],
        tensor.block_index,
        t,
        d,
        tensor.utterance_index,
    )
    path = Path(path)
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<H", len(id_bytes)))
        f.write(id_bytes)
        f.write(payload)
        f.write(struct.pack("<I", checksum))
    return checksum


def read_feature_file(path: str | Path) -> FeatureTensor:
    """Parse a feature file, verifying structure and checksum.

    Raises one classified ``FeatureFileError`` subclass for each corruption
    class: bad magic, unsupported version or dtype, invalid header fields,
    payload-length mismatch, checksum mismatch, non-finite payload.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise LengthMismatchError(f"{path}: file shorter than fixed header")
    magic, version, dtype, modality_code, block_index, t, d, utt_index = _HEADER.unpack_from(
        blob, 0
    )
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: dtype code {dtype}")
    if modality_code not in _MODALITY_NAME:
        raise InvalidHeaderError(f"{path}: modality code {modality_code}")
    if t < 1 or d < 1:
        raise InvalidHeaderError(f"{path}: non-positive dims {t}x{d}")
    offset = _HEADER.size
    if len(blob) < offset + 2:
        raise LengthMismatchError(f"{path}: truncated before dialogue_id")
    (id_len,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    if len(blob) < offset + id_len:
        raise LengthMismatchError(f"{path}: truncated dialogue_id")
    try:
        dialogue_id = blob[offset : offset + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidHeaderError(f"{path}: dialogue_id is not UTF-8") from exc
    offset += id_len
    payload_len = t * d * 4
    if len(blob) != offset + payload_len + 4:
        raise LengthMismatchError(
            f"{path}: header claims {t}x{d} ({payload_len} payload bytes) "
            f"but {len(blob) - offset - 4} present"
        )
    payload = blob[offset : offset + payload_len]
    (stored_crc,) = struct.unpack_from("<I", blob, offset + payload_len)
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatchError(
            f"{path}: checksum {stored_crc:#010x} != computed {actual_crc:#010x}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32, copy=True)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"{path}: non-finite payload entries")
    return FeatureTensor(
        dialogue_id=dialogue_id,
        utterance_index=utt_index,
        modality=_MODALITY_NAME[modality_code],
        block_index=block_index,
        data=data,
    )


@dataclass
class Label:
    """Task label: binary AD flag and/or a depression severity score."""

    ad_positive: bool | None = None
    depression_severity: float | None = None

    def check(self, severity_range: tuple[float, float] = DEFAULT_SEVERITY_RANGE) -> str | None:
        """Return a problem description, or None if the label is valid."""
        if self.ad_positive is None and self.depression_severity is None:
            return "label has neither ad_positive nor depression_severity"
        if self.depression_severity is not None:
            lo, hi = severity_range
            if not (lo <= self.depression_severity <= hi):
                return (
                    f"depression_severity {self.depression_severity} outside [{lo}, {hi}]"
                )
        return None

    def to_json(self) -> dict:
        out = {}
        if self.ad_positive is not None:
            out["ad_positive"] = bool(self.ad_positive)
        if self.depression_severity is not None:
            out["depression_severity"] = float(self.depression_severity)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Label":
        return cls(
            ad_positive=obj.get("ad_positive"),
            depression_severity=obj.get("depression_severity"),
        )


@dataclass
class FeatureRef:
    modality: str
    block_index: int
    path: str
    checksum: int

    def to_json(self) -> dict:
        return {
            "modality": self.modality,
            "block_index": self.block_index,
            "path": self.path,
            "checksum": self.checksum,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureRef":
        return cls(
            modality=obj["modality"],
            block_index=int(obj["block_index"]),
            path=obj["path"],
            checksum=int(obj["checksum"]),
        )


@dataclass
class DialogueEntry:
    dialogue_id: str
    split: str
    num_utterances: int
    label: Label
    feature_refs: list[FeatureRef] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "split": self.split,
            "num_utterances": self.num_utterances,
            "label": self.label.to_json(),
            "feature_refs": [r.to_json() for r in self.feature_refs],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DialogueEntry":
        return cls(
            dialogue_id=obj["dialogue_id"],
            split=obj["split"],
            num_utterances=int(obj["num_utterances"]),
            label=Label.from_json(obj["label"]),
            feature_refs=[FeatureRef.from_json(r) for r in obj["feature_refs"]],
        )


@dataclass
class CorpusManifest:
    """Declarative index of one corpus: dialogues, splits, labels, files."""

    corpus_id: str
    task: str
    dialogues: list[DialogueEntry] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "task": self.task,
            "dialogues": [d.to_json() for d in self.dialogues],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusManifest":
        return cls(
            corpus_id=obj["corpus_id"],
            task=obj["task"],
            dialogues=[DialogueEntry.from_json(d) for d in obj["dialogues"]],
        )


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> CorpusManifest:
    return CorpusManifest.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Violation:
    """One manifest-invariant violation. Violations are data, not errors."""

    dialogue_id: str
    kind: str
    detail: str

    def to_json(self) -> dict:
        return {"dialogue_id": self.dialogue_id, "kind": self.kind, "detail": self.detail}


def validate_manifest(
    manifest: CorpusManifest,
    base_dir: str | Path = ".",
    severity_range: tuple[float, float] = DEFAULT_SEVERITY_RANGE,
) -> list[Violation]:
    """Cross-check a manifest against its referenced files.

    Returns every violation found, deterministically ordered by
    (dialogue_id, kind, detail); an empty list means the manifest is valid.
    Relative feature paths are resolved against ``base_dir``. The check is
    read-only and idempotent.
    """
    base = Path(base_dir)
    violations: list[Violation] = []

    if manifest.task not in TASKS:
        violations.append(Violation("", "bad-task", f"unknown task {manifest.task!r}"))

    seen: set[str] = set()
    for entry in manifest.dialogues:
        if entry.dialogue_id in seen:
            violations.append(
                Violation(entry.dialogue_id, "duplicate-dialogue", "dialogue_id appears twice")
            )
        seen.add(entry.dialogue_id)

    # dims[(modality, block_index)] -> list of (D, dialogue_id, path)
    dims: dict[tuple[str, int], list[tuple[int, str, str]]] = {}

    for entry in manifest.dialogues:
        did = entry.dialogue_id
        if entry.split not in SPLITS:
            violations.append(Violation(did, "bad-split", f"unknown split {entry.split!r}"))
        if entry.num_utterances < 1:
            violations.append(
                Violation(did, "empty-dialogue", f"num_utterances={entry.num_utterances}")
            )
        problem = entry.label.check(severity_range)
        if problem is not None:
            violations.append(Violation(did, "bad-label", problem))

        # utterance coverage per (modality, block)
        covered: dict[tuple[str, int], list[int]] = {}
        for ref in entry.feature_refs:
            fpath = base / ref.path
            if not fpath.is_file():
                violations.append(Violation(did, "missing-file", str(ref.path)))
                continue
            try:
                tensor = read_feature_file(fpath)
            except FeatureFileError as exc:
                violations.append(Violation(did, "unreadable-file", f"{ref.path}: {exc}"))
                continue
            if tensor.dialogue_id != did:
                violations.append(
                    Violation(
                        did,
                        "header-mismatch",
                        f"{ref.path}: header dialogue_id {tensor.dialogue_id!r}",
                    )
                )
            if tensor.modality != ref.modality or tensor.block_index != ref.block_index:
                violations.append(
                    Violation(
                        did,
                        "header-mismatch",
                        f"{ref.path}: header ({tensor.modality}, block {tensor.block_index}) "
                        f"!= ref ({ref.modality}, block {ref.block_index})",
                    )
                )
            if tensor.utterance_index >= entry.num_utterances:
                violations.append(
                    Violation(
                        did,
                        "header-mismatch",
                        f"{ref.path}: utterance_index {tensor.utterance_index} "
                        f">= num_utterances {entry.num_utterances}",
                    )
                )
            stored = zlib.crc32(
                np.ascontiguousarray(tensor.data).tobytes(order="C")
            ) & 0xFFFFFFFF
            if stored != ref.checksum:
                violations.append(
                    Violation(
                        did,
                        "checksum-mismatch",
                        f"{ref.path}: manifest checksum {ref.checksum} != file {stored}",
                    )
                )
            covered.setdefault((ref.modality, ref.block_index), []).append(
                tensor.utterance_index
            )
            dims.setdefault((ref.modality, ref.block_index), []).append(
                (tensor.data.shape[1], did, ref.path)
            )
        for (modality, block), indices in sorted(covered.items()):
            expected = set(range(entry.num_utterances))
            got = sorted(indices)
            if got != sorted(expected):
                violations.append(
                    Violation(
                        did,
                        "utterance-coverage",
                        f"({modality}, block {block}): utterance indices {got} "
                        f"!= 0..{entry.num_utterances - 1}",
                    )
                )

    # D must be constant per (modality, block) across the corpus; deviation
    # from the modal D is flagged per offending file.
    for (modality, block), entries in sorted(dims.items()):
        counts: dict[int, int] = {}
        for d, _, _ in entries:
            counts[d] = counts.get(d, 0) + 1
        reference = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        for d, did, path in entries:
            if d != reference:
                violations.append(
                    Violation(
                        did,
                        "dim-inconsistency",
                        f"{path}: D={d} but ({modality}, block {block}) has D={reference}",
                    )
                )

    violations.sort(key=lambda v: (v.dialogue_id, v.kind, v.detail))
    return violations
