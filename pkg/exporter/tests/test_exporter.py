"""Exporter conformance tests against the downstream format and toolkit."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from xferlab_exporter.audio import load_audio, slice_span
from xferlab_exporter.export import (
    ExportError,
    SpeechEncoder,
    Transcriber,
    TextEncoder,
    export_speech_blocks,
    run_export,
)
from xferlab_exporter.jobs import ExportJob


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestAudio:
    def test_wav_loading(self, wav_fixture):
        wave = load_audio(wav_fixture)
        assert wave.dtype == np.float32
        assert len(wave) == 48_000
        assert np.abs(wave).max() <= 1.0

    def test_span_slicing(self, wav_fixture):
        wave = load_audio(wav_fixture)
        piece = slice_span(wave, 1.0, 2.0)
        assert len(piece) == 16_000
        with pytest.raises(ValueError):
            slice_span(wave, 2.0, 2.0)

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_audio("/no/such/audio.wav")


class TestJobSchema:
    def test_empty_blocks_rejected(self, base_job):
        with pytest.raises(ValueError):
            ExportJob.model_validate({**base_job.model_dump(), "blocks": []})

    def test_out_of_range_block(self, base_job):
        with pytest.raises(ValueError):
            ExportJob.model_validate({**base_job.model_dump(), "blocks": [13]})

    def test_duplicate_dialogue(self, base_job):
        payload = base_job.model_dump()
        payload["dialogues"] = payload["dialogues"] * 2
        with pytest.raises(ValueError):
            ExportJob.model_validate(payload)


class TestSpeechExport:
    def test_base_class_contract(self, base_job):
        """12 blocks + pre-encoder output, 768-d, ~49 frames per second."""
        summary = run_export(base_job)
        out = Path(base_job.output_dir)
        assert summary["num_files"] == 3 * 13
        from xferlab.featurestore import read_feature_file

        for u in range(3):
            for block in range(13):
                tensor = read_feature_file(
                    out / f"dlg-0/u{u:03d}_acoustic_b{block:02d}.ft"
                )
                assert tensor.data.shape[1] == 768
                assert tensor.data.shape[0] == 49
                assert tensor.modality == "acoustic"
                assert tensor.block_index == block
                assert np.all(np.isfinite(tensor.data))

    def test_manifest_passes_downstream_validation(self, base_job):
        summary = run_export(base_job)
        proc = subprocess.run(
            [sys.executable, "-m", "xferlab.cli", "validate", summary["manifest"]],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert "0 violations" in proc.stdout

    def test_repeated_export_bitwise_identical(self, base_job, tmp_path):
        job1 = base_job.model_copy(update={"output_dir": str(tmp_path / "a")})
        job2 = base_job.model_copy(update={"output_dir": str(tmp_path / "b")})
        run_export(job1)
        run_export(job2)
        assert tree_digest(Path(job1.output_dir)) == tree_digest(Path(job2.output_dir))

    def test_silence_clip_frame_count(self, base_job):
        # 1 second of silence -> ~49 frames at the 20 ms encoder stride
        encoder = SpeechEncoder(base_job.models.speech, "cpu")
        states = encoder.block_states(np.zeros(16_000, dtype=np.float32))
        assert len(states) == 13
        for h in states:
            assert h.shape == (49, 768)
            assert np.all(np.isfinite(h))

    def test_blocks_beyond_model_depth_rejected(self, base_job):
        encoder = SpeechEncoder(base_job.models.speech, "cpu")
        encoder.num_blocks = 4  # pretend a shallower model
        with pytest.raises(ExportError):
            export_speech_blocks(base_job, encoder)

    def test_subset_of_blocks(self, base_job, tmp_path):
        job = base_job.model_copy(
            update={"blocks": [1, 5, 11], "output_dir": str(tmp_path / "subset")}
        )
        summary = run_export(job)
        assert summary["num_files"] == 3 * 3
        proc = subprocess.run(
            [sys.executable, "-m", "xferlab.cli", "validate", summary["manifest"]],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0


class TestTextExport:
    @pytest.fixture()
    def text_job(self, base_job, tmp_path):
        return base_job.model_copy(
            update={
                "modalities": ["acoustic", "text"],
                "blocks": [11],
                "output_dir": str(tmp_path / "fused"),
            }
        )

    def test_text_features_and_fusion(self, text_job):
        summary = run_export(text_job)
        from xferlab.corpus import InputSpec, load_corpus
        from xferlab.featurestore import load_manifest, read_feature_file

        manifest = load_manifest(summary["manifest"])
        base = Path(summary["manifest"]).parent
        text_refs = [
            r
            for d in manifest.dialogues
            for r in d.feature_refs
            if r.modality == "text"
        ]
        assert len(text_refs) == 3
        text_block = text_refs[0].block_index
        for ref in text_refs:
            tensor = read_feature_file(base / ref.path)
            assert tensor.data.shape[0] >= 1
            assert tensor.data.shape[1] == 768

        fused = load_corpus(
            manifest, base, InputSpec(acoustic_block=11, text_block=text_block)
        )
        assert fused.train[0].features.shape == (3, 1536)

    def test_transcription_deterministic(self, text_job, asr_model_dir, wav_fixture):
        transcriber = Transcriber(asr_model_dir, "cpu")
        wave = load_audio(wav_fixture)
        piece = slice_span(wave, 0.0, 1.0)
        t1 = transcriber.transcribe(piece)
        t2 = transcriber.transcribe(piece)
        assert t1 == t2

    def test_empty_transcription_still_emits_tensor(self, text_model_dir):
        encoder = TextEncoder(text_model_dir, "cpu")
        tokens = encoder.encode("")
        assert tokens.shape[0] >= 1  # sequence delimiters survive
        assert tokens.shape[1] == 768

    def test_asr_failure_logged_and_skipped(self, text_job, monkeypatch):
        from xferlab_exporter import export as export_mod

        class FailingTranscriber:
            def transcribe(self, waveform):
                raise RuntimeError("decoder exploded")

        refs, log = export_mod.export_text_features(
            text_job,
            transcriber=FailingTranscriber(),
            text_encoder=TextEncoder(text_job.models.text, "cpu"),
        )
        assert len(refs["dlg-0"]) == 3  # fallback features still emitted
        statuses = [u["status"] for u in log["dlg-0"]]
        assert all(s.startswith("asr-failed") for s in statuses)


class TestCli:
    def test_job_file_roundtrip(self, base_job, tmp_path):
        job_path = tmp_path / "job.json"
        job_path.write_text(json.dumps(base_job.model_dump()))
        proc = subprocess.run(
            [sys.executable, "-m", "xferlab_exporter.cli", str(job_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "manifest:" in proc.stdout

    def test_missing_job_file(self):
        proc = subprocess.run(
            [sys.executable, "-m", "xferlab_exporter.cli", "/no/job.json"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 4
