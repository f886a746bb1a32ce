"""Dialogue-level screening experiments on frozen foundation-model features.

Subpackages cover the on-disk feature interchange format, corpus loading
and sub-dialogue augmentation, a small reverse-mode autodiff kernel, the
downstream single- and multi-task models, the training loop, block-wise
probing with report emission, and a synthetic corpus generator. A FastAPI
service (``xferlab.service``) wraps the pipelines; the CLI is a thin
client of that service.
"""

__version__ = "0.1.0"
