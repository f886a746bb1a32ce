"""FastAPI service wrapping the experiment pipelines.

Jobs run synchronously in the request (desk-scale corpora train in seconds
to minutes); heavy artifacts stay on the server filesystem and responses
carry paths plus summaries. Error kinds map onto the CLI's exit codes:
validation(2), divergence(3), io(4).
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..pipelines import (
    ManifestInvalidError,
    PipelineConfig,
    ReportCheckError,
    run_probe,
    run_report,
    run_synth,
    run_train,
    run_validate,
)
from ..trainer import DivergenceError, TrainConfig
from .schemas import (
    ErrorInfo,
    ErrorResponse,
    HealthResponse,
    ProbeRequest,
    ProbeResponse,
    ReportRequest,
    ReportResponse,
    SynthRequest,
    SynthResponse,
    TrainRequest,
    TrainResponse,
    ValidateRequest,
    ValidateResponse,
    ViolationModel,
)

logger = logging.getLogger("xferlab.service")


def _error_response(status: int, kind: str, message: str, violations=None) -> JSONResponse:
    payload = ErrorResponse(
        error=ErrorInfo(
            kind=kind,
            message=message,
            violations=[ViolationModel(**v.to_json()) for v in violations]
            if violations
            else None,
        )
    )
    return JSONResponse(status_code=status, content=payload.model_dump())


def _load_pipeline_config(config_path: str | None, config: dict | None) -> PipelineConfig:
    if config_path is None and config is None:
        raise ValueError("either config_path or an inline config is required")
    if config_path is not None:
        return PipelineConfig.load(config_path)
    return PipelineConfig.from_json(config)


def create_app() -> FastAPI:
    app = FastAPI(title="xferlab", version=__version__)

    @app.exception_handler(ManifestInvalidError)
    async def _manifest_invalid(request: Request, exc: ManifestInvalidError):
        return _error_response(422, "validation", str(exc), exc.violations)

    @app.exception_handler(ReportCheckError)
    async def _report_check(request: Request, exc: ReportCheckError):
        return _error_response(422, "validation", str(exc))

    @app.exception_handler(DivergenceError)
    async def _divergence(request: Request, exc: DivergenceError):
        return _error_response(409, "divergence", str(exc))

    @app.exception_handler(FileNotFoundError)
    async def _not_found(request: Request, exc: FileNotFoundError):
        return _error_response(404, "io", str(exc))

    @app.exception_handler(OSError)
    async def _os_error(request: Request, exc: OSError):
        return _error_response(500, "io", str(exc))

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return _error_response(422, "usage", str(exc))

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.post("/validate", response_model=ValidateResponse)
    def validate(req: ValidateRequest) -> ValidateResponse:
        manifest, violations = run_validate(req.manifest_path)
        return ValidateResponse(
            valid=not violations,
            corpus_id=manifest.corpus_id,
            num_dialogues=len(manifest.dialogues),
            violations=[ViolationModel(**v.to_json()) for v in violations],
        )

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest) -> SynthResponse:
        summary = run_synth(req.spec, req.out_dir)
        return SynthResponse(**summary)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        cfg = _load_pipeline_config(req.config_path, req.config)
        summary = run_train(
            cfg,
            mode=req.mode,
            out_dir=req.out_dir,
            seeds=req.seeds,
            lambda_dep=req.lambda_dep,
        )
        return TrainResponse(**summary)

    @app.post("/probe", response_model=ProbeResponse)
    def probe(req: ProbeRequest) -> ProbeResponse:
        cfg = _load_pipeline_config(req.config_path, req.config)
        weighted_train = (
            TrainConfig.from_json(req.weighted_train) if req.weighted_train else None
        )
        summary = run_probe(
            cfg,
            blocks=req.blocks,
            out_dir=req.out_dir,
            seeds=req.seeds,
            weighted=req.weighted,
            weighted_train=weighted_train,
        )
        return ProbeResponse(**summary)

    @app.post("/report", response_model=ReportResponse)
    def report(req: ReportRequest) -> ReportResponse:
        summary = run_report(req.run_dir, req.out_dir)
        return ReportResponse(**summary)

    return app


app = create_app()
