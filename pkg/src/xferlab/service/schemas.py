"""Pydantic request/response models for the service API."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ViolationModel(BaseModel):
    dialogue_id: str
    kind: str
    detail: str


class ValidateRequest(BaseModel):
    manifest_path: str


class ValidateResponse(BaseModel):
    valid: bool
    corpus_id: str
    num_dialogues: int
    violations: list[ViolationModel]


class SynthRequest(BaseModel):
    spec: dict[str, Any] = Field(default_factory=dict)
    out_dir: str


class SynthResponse(BaseModel):
    base_dir: str
    ad_manifest: str
    dep_manifest: str
    num_ad_dialogues: int
    num_dep_dialogues: int


class TrainRequest(BaseModel):
    config_path: str | None = None
    config: dict[str, Any] | None = None
    mode: Literal["single", "joint"] = "single"
    out_dir: str | None = None
    seeds: list[int] | None = None
    lambda_dep: float | None = None


class TrainResponse(BaseModel):
    out_dir: str
    mode: str
    aggregate: dict[str, Any]
    seeds: list[int]
    files: dict[str, str]


class ProbeRequest(BaseModel):
    config_path: str | None = None
    config: dict[str, Any] | None = None
    blocks: list[int]
    out_dir: str | None = None
    seeds: list[int] | None = None
    weighted: bool = True
    weighted_train: dict[str, Any] | None = None


class ProbeResponse(BaseModel):
    out_dir: str
    blocks: list[int]
    argmax_block: int
    learned_weights: list[float] | None
    rows: list[dict[str, Any]]
    files: dict[str, str]


class ReportRequest(BaseModel):
    run_dir: str
    out_dir: str | None = None


class ReportResponse(BaseModel):
    out_dir: str
    files: dict[str, str]


class ErrorInfo(BaseModel):
    kind: Literal["validation", "divergence", "io", "usage", "internal"]
    message: str
    violations: list[ViolationModel] | None = None


class ErrorResponse(BaseModel):
    error: ErrorInfo
