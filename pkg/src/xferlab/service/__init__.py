"""FastAPI service exposing the experiment pipelines."""

from .app import app, create_app

__all__ = ["app", "create_app"]
