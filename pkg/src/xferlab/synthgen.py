"""Deterministic synthetic corpora with a closed-form decision oracle.

The generative model is linear-Gaussian so the optimal decision rule is
known exactly: each dialogue draws a latent pair (za, zd) with
per-coordinate correlation ``shared_rho``; the screening label is the sign
of za[0] and the severity score is an affine map of zd[0]. Utterance
frames are an orthonormal mixing of the latent plus isotropic noise, so
least-squares latent recovery (the oracle) is the Bayes rule. Blocks other
than ``informative_block`` are pure noise, which gives block-wise probing
a planted ground truth.

Corpora are written in the standard feature-file + manifest format; the
spec used for generation is stored alongside for reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featurestore import (
    CorpusManifest,
    DialogueEntry,
    FeatureRef,
    FeatureTensor,
    Label,
    save_manifest,
    write_feature_file,
)
from .rngutil import derive_rng


@dataclass
class SplitCounts:
    train: int = 20
    validation: int = 8
    test: int = 10

    def items(self):
        return (("train", self.train), ("validation", self.validation), ("test", self.test))

    def to_json(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    @classmethod
    def from_json(cls, obj) -> "SplitCounts":
        if isinstance(obj, dict):
            return cls(**obj)
        return cls(*obj)


@dataclass
class SynthSpec:
    ad_dialogues: SplitCounts = field(default_factory=SplitCounts)
    dep_dialogues: SplitCounts = field(default_factory=lambda: SplitCounts(24, 8, 10))
    n_range: tuple[int, int] = (10, 26)  # utterances per dialogue, mean ~18
    t_range: tuple[int, int] = (4, 10)  # frames per utterance
    feature_dim: int = 24
    text_dim: int | None = None
    latent_dim: int = 4
    shared_rho: float = 0.0
    noise_sigma: float = 0.5
    utterance_sigma: float = 0.25
    num_blocks: int = 1
    informative_block: int | None = None  # None: every block carries signal
    label_margin: float = 0.0  # min |za[0]| enforced by rejection
    severity_range: tuple[float, float] = (0.0, 24.0)
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.shared_rho <= 1.0:
            raise ValueError("shared_rho must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_range[0] < 1 or self.n_range[0] > self.n_range[1]:
            raise ValueError(f"bad n_range {self.n_range}")
        if self.t_range[0] < 1 or self.t_range[0] > self.t_range[1]:
            raise ValueError(f"bad t_range {self.t_range}")
        if self.feature_dim < 2 * self.latent_dim:
            raise ValueError("feature_dim must be >= 2 * latent_dim for orthonormal mixing")
        if self.informative_block is not None and not (
            1 <= self.informative_block <= self.num_blocks
        ):
            raise ValueError("informative_block outside 1..num_blocks")

    def to_json(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, SplitCounts):
                v = v.to_json()
            elif isinstance(v, tuple):
                v = list(v)
            out[k] = v
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        for key in ("ad_dialogues", "dep_dialogues"):
            if key in known:
                known[key] = SplitCounts.from_json(known[key])
        for key in ("n_range", "t_range", "severity_range"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


def mixing_matrix(spec: SynthSpec) -> np.ndarray:
    """Orthonormal (feature_dim, 2*latent_dim) map, derived from the seed."""
    rng = derive_rng(spec.rng_seed, "mixing")
    raw = rng.normal(size=(spec.feature_dim, 2 * spec.latent_dim))
    q, _ = np.linalg.qr(raw)
    return q[:, : 2 * spec.latent_dim]


def text_matrix(spec: SynthSpec) -> np.ndarray:
    rng = derive_rng(spec.rng_seed, "text-mixing")
    raw = rng.normal(size=(spec.text_dim, 2 * spec.latent_dim))
    q, _ = np.linalg.qr(raw)
    return q[:, : 2 * spec.latent_dim]


def _severity_from(zd0: float, spec: SynthSpec) -> float:
    lo, hi = spec.severity_range
    mid = (lo + hi) / 2.0
    slope = (hi - lo) / 6.0
    return float(np.clip(mid + slope * zd0, lo, hi))


def _draw_latents(rng: np.random.Generator, spec: SynthSpec, want_positive: bool):
    """Latent pair with corr(za_i, zd_i) = shared_rho and the requested sign."""
    m = spec.latent_dim
    while True:
        za = rng.normal(size=m)
        if abs(za[0]) < spec.label_margin:
            continue
        if (za[0] > 0) == want_positive:
            break
    eps = rng.normal(size=m)
    zd = spec.shared_rho * za + np.sqrt(1.0 - spec.shared_rho**2) * eps
    return za, zd


@dataclass
class GenResult:
    ad_manifest: CorpusManifest
    dep_manifest: CorpusManifest
    ad_manifest_path: str
    dep_manifest_path: str
    base_dir: str
    latents: dict  # dialogue_id -> {"za0", "zd0", combined per corpus}


def _gen_corpus(
    spec: SynthSpec,
    task: str,
    counts: SplitCounts,
    base: Path,
    mix: np.ndarray,
    tmix: np.ndarray | None,
    latents_out: dict,
) -> CorpusManifest:
    corpus_dir = base / task
    corpus_dir.mkdir(parents=True, exist_ok=True)
    dialogues = []
    for split, count in counts.items():
        for index in range(count):
            rng = derive_rng(spec.rng_seed, task, split, index)
            did = f"{task}-{split}-{index:03d}"
            want_positive = index % 2 == 0  # alternating: balanced by construction
            za, zd = _draw_latents(rng, spec, want_positive)
            z_full = np.concatenate([za, zd])
            if task == "ad":
                label = Label(ad_positive=bool(za[0] > 0))
            else:
                label = Label(depression_severity=_severity_from(zd[0], spec))
            latents_out[did] = {
                "za0": float(za[0]),
                "zd0": float(zd[0]),
                "ad_positive": bool(za[0] > 0),
                "severity": _severity_from(zd[0], spec),
            }
            n = int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))
            refs = []
            (corpus_dir / did).mkdir(parents=True, exist_ok=True)
            for u in range(n):
                u_latent = z_full + spec.utterance_sigma * rng.normal(size=z_full.size)
                t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
                clean = u_latent @ mix.T  # (feature_dim,)
                for block in range(1, spec.num_blocks + 1):
                    informative = (
                        spec.informative_block is None or block == spec.informative_block
                    )
                    if informative:
                        frames = clean[None, :] + spec.noise_sigma * rng.normal(
                            size=(t, spec.feature_dim)
                        )
                    else:
                        frames = rng.normal(size=(t, spec.feature_dim))
                    tensor = FeatureTensor(
                        dialogue_id=did,
                        utterance_index=u,
                        modality="acoustic",
                        block_index=block,
                        data=frames.astype(np.float32),
                    )
                    rel = f"{task}/{did}/u{u:03d}_acoustic_b{block:02d}.ft"
                    checksum = write_feature_file(tensor, base / rel)
                    refs.append(FeatureRef("acoustic", block, rel, checksum))
                if tmix is not None:
                    tokens = (u_latent @ tmix.T)[None, :] + spec.noise_sigma * rng.normal(
                        size=(max(2, t // 2), spec.text_dim)
                    )
                    tensor = FeatureTensor(
                        dialogue_id=did,
                        utterance_index=u,
                        modality="text",
                        block_index=spec.num_blocks,
                        data=tokens.astype(np.float32),
                    )
                    rel = f"{task}/{did}/u{u:03d}_text.ft"
                    checksum = write_feature_file(tensor, base / rel)
                    refs.append(FeatureRef("text", spec.num_blocks, rel, checksum))
            dialogues.append(
                DialogueEntry(
                    dialogue_id=did,
                    split=split,
                    num_utterances=n,
                    label=label,
                    feature_refs=refs,
                )
            )
    return CorpusManifest(corpus_id=f"synth-{task}", task=task, dialogues=dialogues)


def gen_pair(spec: SynthSpec, out_dir: str | Path) -> GenResult:
    """Generate matched screening + severity corpora under ``out_dir``.

    Writes feature files, one manifest per corpus, the generation spec, and
    a latent audit log; everything is a pure function of the spec.
    """
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    mix = mixing_matrix(spec)
    tmix = text_matrix(spec) if spec.text_dim else None
    latents: dict = {}
    ad_manifest = _gen_corpus(spec, "ad", spec.ad_dialogues, base, mix, tmix, latents)
    dep_manifest = _gen_corpus(
        spec, "depression", spec.dep_dialogues, base, mix, tmix, latents
    )
    ad_path = base / "ad_manifest.json"
    dep_path = base / "dep_manifest.json"
    save_manifest(ad_manifest, ad_path)
    save_manifest(dep_manifest, dep_path)
    (base / "synth_spec.json").write_text(
        json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (base / "latents.json").write_text(
        json.dumps(latents, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return GenResult(
        ad_manifest=ad_manifest,
        dep_manifest=dep_manifest,
        ad_manifest_path=str(ad_path),
        dep_manifest_path=str(dep_path),
        base_dir=str(base),
        latents=latents,
    )


def _recover_latent(pooled_features: np.ndarray, spec: SynthSpec) -> np.ndarray:
    pooled = np.asarray(pooled_features, dtype=np.float64)
    if pooled.ndim == 1:
        pooled = pooled[None, :]
    if pooled.shape[1] != spec.feature_dim:
        raise ValueError(
            f"feature dim {pooled.shape[1]} != spec feature_dim {spec.feature_dim}"
        )
    mix = mixing_matrix(spec)
    dialogue_mean = pooled.mean(axis=0)
    return mix.T @ dialogue_mean  # orthonormal columns: least-squares recovery


def oracle_label(pooled_features: np.ndarray, spec: SynthSpec) -> bool:
    """Bayes-rule label from pooled dialogue features (generator's own rule)."""
    z_hat = _recover_latent(pooled_features, spec)
    return bool(z_hat[0] > 0)


def oracle_severity(pooled_features: np.ndarray, spec: SynthSpec) -> float:
    """Bayes-rule severity prediction from pooled dialogue features."""
    z_hat = _recover_latent(pooled_features, spec)
    return _severity_from(z_hat[spec.latent_dim], spec)
