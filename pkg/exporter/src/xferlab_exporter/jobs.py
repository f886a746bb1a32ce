"""Export-job schema: which audio, which models, which blocks, where to."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, field_validator


class UtteranceSpan(BaseModel):
    """One utterance as a [start, end) second range into the dialogue audio."""

    start: float = Field(ge=0.0)
    end: float = Field(gt=0.0)

    @field_validator("end")
    @classmethod
    def _ordered(cls, v, info):
        start = info.data.get("start")
        if start is not None and v <= start:
            raise ValueError(f"end {v} must exceed start {start}")
        return v


class DialogueJob(BaseModel):
    dialogue_id: str
    audio_path: str
    split: Literal["train", "validation", "test"] = "train"
    label: dict = Field(default_factory=dict)  # ad_positive / depression_severity
    utterances: list[UtteranceSpan]

    @field_validator("utterances")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("dialogue needs at least one utterance span")
        return v


class ModelIds(BaseModel):
    """Hub ids or local snapshot paths; pin revisions for reproducibility."""

    speech: str = "microsoft/wavlm-base-plus"
    asr: str = "openai/whisper-small"
    text: str = "bert-base-uncased"


class ExportJob(BaseModel):
    corpus_id: str
    task: Literal["ad", "depression"] = "ad"
    models: ModelIds = Field(default_factory=ModelIds)
    blocks: list[int] = Field(default_factory=lambda: list(range(13)))
    modalities: list[Literal["acoustic", "text"]] = Field(
        default_factory=lambda: ["acoustic", "text"]
    )
    output_dir: str = "features"
    device: str = "cpu"
    torch_threads: int = 1  # fixed thread count keeps repeated exports bitwise-equal
    dialogues: list[DialogueJob]

    @field_validator("blocks")
    @classmethod
    def _block_range(cls, v):
        if not v:
            raise ValueError("blocks must be non-empty")
        if any(b < 0 or b > 12 for b in v):
            raise ValueError(f"blocks outside [0, 12]: {v}")
        return sorted(set(v))

    @field_validator("dialogues")
    @classmethod
    def _has_dialogues(cls, v):
        if not v:
            raise ValueError("job has no dialogues")
        seen = set()
        for d in v:
            if d.dialogue_id in seen:
                raise ValueError(f"duplicate dialogue_id {d.dialogue_id}")
            seen.add(d.dialogue_id)
        return v

    @classmethod
    def load(cls, path: str | Path) -> "ExportJob":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
