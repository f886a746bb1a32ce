"""Corpus loading, pooling, and sub-dialogue augmentation tests."""

import math

import numpy as np
import pytest

from xferlab.corpus import (
    AugmentationConfig,
    Corpus,
    DialogueSample,
    InputSpec,
    _augment_split,
    augment_corpus,
    compute_balance_target,
    load_block_corpora,
    load_corpus,
    load_stacked_corpus,
    pool_utterance,
    sample_subdialogue,
)
from xferlab.featurestore import (
    CorpusManifest,
    DialogueEntry,
    FeatureRef,
    FeatureTensor,
    Label,
    write_feature_file,
)
from xferlab.rngutil import derive_rng


class TestPooling:
    def test_mean_of_two_rows(self):
        assert np.allclose(pool_utterance(np.array([[1.0, 3.0], [3.0, 5.0]])), [2.0, 4.0])

    def test_single_row_identity(self):
        v = np.array([[0.5, -1.0, 2.0]])
        assert np.array_equal(pool_utterance(v), v[0])

    def test_matches_bruteforce_column_sums(self):
        rng = np.random.default_rng(3)
        frames = rng.normal(size=(13, 5))
        expected = [sum(frames[t][j] for t in range(13)) / 13 for j in range(5)]
        got = pool_utterance(frames)
        assert np.allclose(got, expected, rtol=1e-6)

    def test_max_mode(self):
        frames = np.array([[1.0, 5.0], [2.0, 0.0]])
        assert np.array_equal(pool_utterance(frames, mode="max"), [2.0, 5.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pool_utterance(np.zeros((0, 4)))


class TestSubdialogue:
    def test_n18_lengths_in_range(self):
        cfg = AugmentationConfig(rng_seed=1)
        rng = derive_rng(1, "t")
        for _ in range(2000):
            a, b = sample_subdialogue(18, cfg, rng)
            length = b - a + 1
            assert 1 <= a <= b <= 18
            assert 9 <= length <= 18

    def test_n1_only_window(self):
        cfg = AugmentationConfig(rng_seed=1)
        rng = derive_rng(2, "t")
        for _ in range(20):
            assert sample_subdialogue(1, cfg, rng) == (1, 1)

    def test_length_distribution_uniform(self):
        from scipy import stats

        cfg = AugmentationConfig(rng_seed=1)
        rng = derive_rng(3, "t")
        counts = {length: 0 for length in range(5, 11)}
        draws = 10_000
        for _ in range(draws):
            a, b = sample_subdialogue(10, cfg, rng)
            counts[b - a + 1] += 1
        observed = np.array([counts[k] for k in sorted(counts)])
        _, p = stats.chisquare(observed)
        assert p > 0.01

    def test_start_uniform_given_length(self):
        # for N=6, min_fraction=1.0 the window is always (1, 6)
        cfg = AugmentationConfig(min_fraction=1.0, rng_seed=1)
        rng = derive_rng(4, "t")
        assert all(sample_subdialogue(6, cfg, rng) == (1, 6) for _ in range(20))


def _sample(did, n=6, d=3, task="ad", seed=0):
    rng = np.random.default_rng(seed)
    return DialogueSample(
        dialogue_id=did,
        features=rng.normal(size=(n, d)).astype(np.float32),
        label=Label(ad_positive=True),
        source_task=task,
    )


class TestAugmentation:
    def _corpus(self, n_train=3):
        return Corpus(
            corpus_id="c",
            task="ad",
            splits={
                "train": [_sample(f"d{i}", seed=i) for i in range(n_train)],
                "validation": [_sample("v0", seed=99)],
                "test": [_sample("t0", seed=98)],
            },
        )

    def test_counts_per_dialogue(self):
        corpus = self._corpus(3)
        out, log = augment_corpus(corpus, AugmentationConfig(subdialogues_per_dialogue=50, rng_seed=5))
        assert len(out.train) == 150
        assert len(log) == 150
        assert len(out.validation) == 1 and len(out.test) == 1

    def test_degenerate_full_window(self):
        corpus = self._corpus(2)
        cfg = AugmentationConfig(subdialogues_per_dialogue=1, min_fraction=1.0, rng_seed=5)
        out, _ = augment_corpus(corpus, cfg)
        for aug, src in zip(out.train, corpus.train):
            assert np.array_equal(aug.features, src.features)
            assert aug.window == (1, src.num_utterances)

    def test_slice_identity_and_label_preservation(self):
        corpus = self._corpus(4)
        out, log = augment_corpus(corpus, AugmentationConfig(subdialogues_per_dialogue=20, rng_seed=7))
        sources = {s.dialogue_id: s for s in corpus.train}
        for aug in out.train:
            src = sources[aug.source_id]
            a, b = aug.window
            assert np.array_equal(aug.features, src.features[a - 1 : b])
            assert aug.label == src.label

    def test_determinism(self):
        corpus = self._corpus(3)
        cfg = AugmentationConfig(subdialogues_per_dialogue=10, rng_seed=11)
        out1, log1 = augment_corpus(corpus, cfg)
        out2, log2 = augment_corpus(corpus, cfg)
        assert log1 == log2
        for s1, s2 in zip(out1.train, out2.train):
            assert s1.dialogue_id == s2.dialogue_id
            assert np.array_equal(s1.features, s2.features)

    def test_non_train_split_rejected(self):
        with pytest.raises(ValueError):
            _augment_split([_sample("x")], AugmentationConfig(rng_seed=0), "test")

    def test_balancing(self):
        # 100 ad dialogues x 50 vs 200 dep dialogues, balanced
        ad_total = 100 * 50
        target = compute_balance_target(ad_total, 200)
        dep = Corpus(
            corpus_id="dep",
            task="depression",
            splits={"train": [_sample(f"d{i}", task="depression", seed=i) for i in range(200)],
                    "validation": [], "test": []},
        )
        cfg = AugmentationConfig(rng_seed=1, balance_target=target)
        out, _ = augment_corpus(dep, cfg)
        assert abs(len(out.train) - ad_total) <= 200


def write_synthetic_manifest(tmp_path, num_blocks=2, text=False, n_utts=3, d=4, t=5):
    rng = np.random.default_rng(12)
    dialogues = []
    for i in range(2):
        did = f"dlg{i}"
        refs = []
        for u in range(n_utts):
            for b in range(1, num_blocks + 1):
                tensor = FeatureTensor(did, u, "acoustic", b, rng.normal(size=(t, d)).astype(np.float32))
                rel = f"{did}_u{u}_b{b}.ft"
                refs.append(FeatureRef("acoustic", b, rel, write_feature_file(tensor, tmp_path / rel)))
            if text:
                tensor = FeatureTensor(did, u, "text", 12, rng.normal(size=(2, 3)).astype(np.float32))
                rel = f"{did}_u{u}_text.ft"
                refs.append(FeatureRef("text", 12, rel, write_feature_file(tensor, tmp_path / rel)))
        dialogues.append(
            DialogueEntry(did, "train" if i == 0 else "test", n_utts, Label(ad_positive=i == 0), refs)
        )
    return CorpusManifest("syn", "ad", dialogues)


class TestLoading:
    def test_pooled_shapes_and_rows(self, tmp_path):
        manifest = write_synthetic_manifest(tmp_path)
        corpus = load_corpus(manifest, tmp_path, InputSpec(acoustic_block=1))
        assert len(corpus.train) == 1 and len(corpus.test) == 1
        sample = corpus.train[0]
        assert sample.features.shape == (3, 4)
        assert sample.features.dtype == np.float32

    def test_modality_concatenation(self, tmp_path):
        manifest = write_synthetic_manifest(tmp_path, text=True)
        fused = load_corpus(manifest, tmp_path, InputSpec(acoustic_block=2, text_block=12))
        acoustic = load_corpus(manifest, tmp_path, InputSpec(acoustic_block=2))
        text = load_corpus(manifest, tmp_path, InputSpec(acoustic_block=None, text_block=12))
        f = fused.train[0].features
        assert f.shape == (3, 4 + 3)
        assert np.array_equal(f[:, :4], acoustic.train[0].features)
        assert np.array_equal(f[:, 4:], text.train[0].features)

    def test_block_corpora_and_stacking(self, tmp_path):
        manifest = write_synthetic_manifest(tmp_path, num_blocks=3)
        per_block = load_block_corpora(manifest, tmp_path, [1, 2, 3])
        stacked = load_stacked_corpus(manifest, tmp_path, [1, 2, 3])
        s = stacked.train[0]
        assert s.features.shape == (3, 3, 4)
        for k, b in enumerate([1, 2, 3]):
            assert np.array_equal(s.features[k], per_block[b].train[0].features)

    def test_pool_row_matches_file_mean(self, tmp_path):
        from xferlab.featurestore import read_feature_file

        manifest = write_synthetic_manifest(tmp_path)
        corpus = load_corpus(manifest, tmp_path, InputSpec(acoustic_block=1))
        tensor = read_feature_file(tmp_path / "dlg0_u0_b1.ft")
        assert np.allclose(corpus.train[0].features[0], tensor.data.mean(axis=0), rtol=1e-6)

    def test_augmented_stacked_slices(self, tmp_path):
        # augmentation slices the utterance axis of (B, N, D) stacks too
        manifest = write_synthetic_manifest(tmp_path, num_blocks=2)
        stacked = load_stacked_corpus(manifest, tmp_path, [1, 2])
        out, _ = augment_corpus(stacked, AugmentationConfig(subdialogues_per_dialogue=5, rng_seed=3))
        src = stacked.train[0]
        for aug in out.train:
            a, b = aug.window
            assert aug.features.shape[0] == 2
            assert np.array_equal(aug.features, src.features[:, a - 1 : b, :])
