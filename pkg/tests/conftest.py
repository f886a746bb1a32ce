"""Shared fixtures: one tiny synthetic corpus pair reused across modules."""

import json

import pytest

from xferlab.synthgen import SplitCounts, SynthSpec, gen_pair


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    """Small, easily learnable corpus pair with manifests on disk."""
    base = tmp_path_factory.mktemp("tiny_pair")
    spec = SynthSpec(
        ad_dialogues=SplitCounts(8, 4, 6),
        dep_dialogues=SplitCounts(8, 4, 6),
        n_range=(4, 8),
        t_range=(3, 5),
        feature_dim=12,
        latent_dim=3,
        noise_sigma=0.3,
        utterance_sigma=0.2,
        label_margin=0.5,
        rng_seed=1234,
    )
    result = gen_pair(spec, base)
    return spec, result


@pytest.fixture()
def pipeline_config_file(tiny_pair, tmp_path):
    """A pipeline config JSON pointing at the tiny corpus pair."""
    spec, result = tiny_pair
    cfg = {
        "ad_manifest": result.ad_manifest_path,
        "dep_manifest": result.dep_manifest_path,
        "train": {
            "epochs": 2,
            "lr_start": 1e-3,
            "lr_end": 5e-4,
            "batch_size": 8,
            "seeds": [0, 1],
            "dropout_p": 0.1,
        },
        "model": {
            "d_model": 8,
            "num_heads": 2,
            "d_ff": 16,
            "fc_hidden": 4,
            "num_encoder_blocks": 1,
        },
        "augment": {"subdialogues_per_dialogue": 3, "rng_seed": 7},
        "out_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
