"""Deterministic RNG derivation.

All randomness in the package flows from explicit integer seeds. Streams
for sub-units (dialogues, epochs, model init) are derived from a root seed
plus stable string tags, so results are reproducible regardless of
iteration order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash64(text: str) -> int:
    """Process-independent 64-bit hash of a string (unlike builtin hash)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """A generator seeded from ``seed`` and a sequence of tags."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(stable_hash64(tag))
        else:
            entropy.append(int(tag) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(entropy)
