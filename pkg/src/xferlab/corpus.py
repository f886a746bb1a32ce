"""Corpus loading, utterance pooling, and sub-dialogue augmentation.

A manifest is materialized into dialogues of pooled utterance vectors:
each utterance's (T, D) frame/token matrix collapses to one D-vector,
modalities are optionally concatenated, and the result is cached as a
single (N, D_in) matrix per dialogue. Upstream features are frozen, so
pooling once at ingestion is safe.

Training data is augmented by sampling contiguous sub-dialogues of random
length, preserving utterance order and the source label. Cross-corpus
sample counts are balanced by adjusting the per-dialogue sample count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .featurestore import CorpusManifest, Label, read_feature_file
from .rngutil import derive_rng


def pool_utterance(frames: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Collapse a (T, D) utterance matrix to a single D-vector.

    ``mode`` is "mean" (default) or "max"; mean over the time axis is the
    standard choice for frozen-feature probing.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected a (T>=1, D) matrix, got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("non-finite entries in utterance frames")
    if mode == "mean":
        return frames.mean(axis=0)
    if mode == "max":
        return frames.max(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


@dataclass
class DialogueSample:
    """One dialogue as an ordered (N, D_in) matrix of pooled utterances."""

    dialogue_id: str
    features: np.ndarray
    label: Label
    source_task: str
    source_id: str = ""
    window: tuple[int, int] | None = None  # 1-based inclusive (a, b) into the source

    def __post_init__(self):
        if not self.source_id:
            self.source_id = self.dialogue_id

    @property
    def num_utterances(self) -> int:
        return self.features.shape[-2]


@dataclass
class AugmentationConfig:
    subdialogues_per_dialogue: int = 50
    min_fraction: float = 0.5
    rng_seed: int = 0
    balance_target: int | None = None  # per-dialogue count override

    def __post_init__(self):
        if not 0 < self.min_fraction <= 1:
            raise ValueError("min_fraction must be in (0, 1]")
        if self.subdialogues_per_dialogue < 1:
            raise ValueError("subdialogues_per_dialogue must be positive")


@dataclass
class Corpus:
    """Immutable-by-convention container of samples per split."""

    corpus_id: str
    task: str
    splits: dict[str, list[DialogueSample]] = field(default_factory=dict)

    @property
    def train(self) -> list[DialogueSample]:
        return self.splits.get("train", [])

    @property
    def validation(self) -> list[DialogueSample]:
        return self.splits.get("validation", [])

    @property
    def test(self) -> list[DialogueSample]:
        return self.splits.get("test", [])

    @property
    def feature_dim(self) -> int:
        for samples in self.splits.values():
            if samples:
                return samples[0].features.shape[-1]
        raise ValueError("empty corpus")


@dataclass
class InputSpec:
    """Which blocks feed the downstream model, per modality.

    ``acoustic_block`` / ``text_block`` select one block each; set either
    to None to drop that modality. When both are set the pooled vectors
    are concatenated acoustic-first.
    """

    acoustic_block: int | None = 11
    text_block: int | None = None
    pooling: str = "mean"


def _pooled_rows(
    manifest: CorpusManifest, base_dir: Path, modality: str, block: int, pooling: str
) -> dict[str, np.ndarray]:
    """Per-dialogue (N, D) matrices of pooled utterances for one block."""
    rows: dict[str, np.ndarray] = {}
    for entry in manifest.dialogues:
        refs = [
            r
            for r in entry.feature_refs
            if r.modality == modality and r.block_index == block
        ]
        if len(refs) != entry.num_utterances:
            raise ValueError(
                f"{manifest.corpus_id}/{entry.dialogue_id}: expected "
                f"{entry.num_utterances} ({modality}, block {block}) refs, got {len(refs)}"
            )
        pooled = [None] * entry.num_utterances
        for ref in refs:
            tensor = read_feature_file(base_dir / ref.path)
            pooled[tensor.utterance_index] = pool_utterance(tensor.data, pooling)
        rows[entry.dialogue_id] = np.stack(pooled).astype(np.float32)
    return rows


def load_corpus(
    manifest: CorpusManifest, base_dir: str | Path, input_spec: InputSpec
) -> Corpus:
    """Materialize a manifest into pooled, modality-fused dialogue samples."""
    if input_spec.acoustic_block is None and input_spec.text_block is None:
        raise ValueError("input_spec selects no modality")
    base = Path(base_dir)
    parts: list[dict[str, np.ndarray]] = []
    if input_spec.acoustic_block is not None:
        parts.append(
            _pooled_rows(manifest, base, "acoustic", input_spec.acoustic_block, input_spec.pooling)
        )
    if input_spec.text_block is not None:
        parts.append(
            _pooled_rows(manifest, base, "text", input_spec.text_block, input_spec.pooling)
        )
    splits: dict[str, list[DialogueSample]] = {"train": [], "validation": [], "test": []}
    for entry in manifest.dialogues:
        mats = [p[entry.dialogue_id] for p in parts]
        features = mats[0] if len(mats) == 1 else np.hstack(mats)
        splits[entry.split].append(
            DialogueSample(
                dialogue_id=entry.dialogue_id,
                features=features,
                label=entry.label,
                source_task=manifest.task,
            )
        )
    return Corpus(corpus_id=manifest.corpus_id, task=manifest.task, splits=splits)


def load_block_corpora(
    manifest: CorpusManifest,
    base_dir: str | Path,
    blocks: list[int],
    modality: str = "acoustic",
    pooling: str = "mean",
) -> dict[int, Corpus]:
    """One single-modality corpus per probed block index."""
    return {
        b: load_corpus(
            manifest,
            base_dir,
            InputSpec(
                acoustic_block=b if modality == "acoustic" else None,
                text_block=b if modality == "text" else None,
                pooling=pooling,
            ),
        )
        for b in blocks
    }


def load_stacked_corpus(
    manifest: CorpusManifest,
    base_dir: str | Path,
    blocks: list[int],
    modality: str = "acoustic",
    pooling: str = "mean",
) -> Corpus:
    """Corpus whose sample features are stacked per-block: shape (B, N, D).

    Input for the learned weighted block combination; all blocks must share
    the same feature dim.
    """
    per_block = load_block_corpora(manifest, base_dir, blocks, modality, pooling)
    stacked = Corpus(corpus_id=manifest.corpus_id, task=manifest.task, splits={})
    for split in ("train", "validation", "test"):
        samples = []
        for i, base_sample in enumerate(per_block[blocks[0]].splits[split]):
            mats = [per_block[b].splits[split][i].features for b in blocks]
            samples.append(
                replace(base_sample, features=np.stack(mats).astype(np.float32))
            )
        stacked.splits[split] = samples
    return stacked


def sample_subdialogue(
    N: int, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[int, int]:
    """Draw a contiguous window (a, b), 1-based inclusive, from N utterances.

    The window length L is uniform over [ceil(min_fraction*N), N], then the
    start a is uniform over [1, N-L+1]. Utterance order is preserved.
    """
    if N < 1:
        raise ValueError("N must be positive")
    l_min = max(1, math.ceil(cfg.min_fraction * N))
    length = int(rng.integers(l_min, N + 1))
    a = int(rng.integers(1, N - length + 2))
    return a, a + length - 1


def compute_balance_target(reference_total: int, num_dialogues: int) -> int:
    """Per-dialogue sample count that matches another corpus's total."""
    if num_dialogues < 1:
        raise ValueError("num_dialogues must be positive")
    return max(1, round(reference_total / num_dialogues))


def _augment_split(
    samples: list[DialogueSample], cfg: AugmentationConfig, split: str
) -> tuple[list[DialogueSample], list[dict]]:
    if split != "train":
        raise ValueError(f"augmentation applies to the train split only, not {split!r}")
    count = cfg.balance_target if cfg.balance_target is not None else cfg.subdialogues_per_dialogue
    out: list[DialogueSample] = []
    log: list[dict] = []
    for sample in samples:
        rng = derive_rng(cfg.rng_seed, "augment", sample.dialogue_id)
        n = sample.num_utterances
        for k in range(count):
            a, b = sample_subdialogue(n, cfg, rng)
            out.append(
                DialogueSample(
                    dialogue_id=f"{sample.dialogue_id}#{k}",
                    features=sample.features[..., a - 1 : b, :].copy(),
                    label=sample.label,
                    source_task=sample.source_task,
                    source_id=sample.dialogue_id,
                    window=(a, b),
                )
            )
            log.append({"dialogue_id": sample.dialogue_id, "a": a, "b": b})
    return out, log


def augment_corpus(
    corpus: Corpus, cfg: AugmentationConfig
) -> tuple[Corpus, list[dict]]:
    """Replace the train split with sampled sub-dialogues.

    Each source dialogue contributes exactly ``subdialogues_per_dialogue``
    samples (or ``balance_target`` when set); every sample is a contiguous
    slice that inherits the source label. Validation and test splits pass
    through untouched. Also returns the augmentation log (one record per
    sample: dialogue_id, a, b) for reproducibility audits.
    """
    augmented, log = _augment_split(corpus.train, cfg, "train")
    return (
        Corpus(
            corpus_id=corpus.corpus_id,
            task=corpus.task,
            splits={
                "train": augmented,
                "validation": list(corpus.validation),
                "test": list(corpus.test),
            },
        ),
        log,
    )
