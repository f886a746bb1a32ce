"""Feature export: per-block speech hidden states, ASR + text embeddings.

Models are loaded from hub ids or local snapshot directories. Inference is
eval-mode, greedy, and single-threaded by default, so repeated exports of
the same job are bitwise-identical. Each utterance yields one feature file
per (modality, block); files are written atomically and indexed by a
manifest that the downstream toolkit validates.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from .audio import load_audio, slice_span
from .format import write_feature_file, write_manifest
from .jobs import ExportJob

logger = logging.getLogger("xferlab_exporter")


class ExportError(RuntimeError):
    pass


def _rel_path(dialogue_id: str, utt: int, modality: str, block: int) -> str:
    return f"{dialogue_id}/u{utt:03d}_{modality}_b{block:02d}.ft"


class SpeechEncoder:
    """Frozen speech encoder exposing all intermediate block outputs."""

    def __init__(self, model_id: str, device: str = "cpu"):
        from transformers import AutoFeatureExtractor, AutoModel

        self.extractor = AutoFeatureExtractor.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        self.device = device
        self.num_blocks = self.model.config.num_hidden_layers
        self.hidden_size = self.model.config.hidden_size

    @torch.no_grad()
    def block_states(self, waveform: np.ndarray) -> list[np.ndarray]:
        """Hidden states per block: index 0 is the pre-encoder output."""
        inputs = self.extractor(waveform, sampling_rate=16_000, return_tensors="pt")
        out = self.model(
            inputs.input_values.to(self.device), output_hidden_states=True
        )
        return [h.squeeze(0).cpu().numpy().astype(np.float32) for h in out.hidden_states]


class Transcriber:
    """Greedy ASR decoding (deterministic by construction)."""

    def __init__(self, model_id: str, device: str = "cpu"):
        from transformers import (
            AutoFeatureExtractor,
            AutoModelForSpeechSeq2Seq,
            AutoTokenizer,
        )

        self.extractor = AutoFeatureExtractor.from_pretrained(model_id)
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModelForSpeechSeq2Seq.from_pretrained(model_id).to(device).eval()
        self.device = device

    @torch.no_grad()
    def transcribe(self, waveform: np.ndarray) -> str:
        features = self.extractor(
            waveform, sampling_rate=16_000, return_tensors="pt"
        ).input_features.to(self.device)
        # leave headroom for the decoder start/prompt tokens
        limit = getattr(self.model.config, "max_target_positions", 448)
        ids = self.model.generate(
            features, do_sample=False, num_beams=1, max_new_tokens=min(128, limit - 8)
        )
        return self.tokenizer.decode(ids[0], skip_special_tokens=True).strip()


class TextEncoder:
    """Token-level embeddings from a frozen text encoder's final layer."""

    def __init__(self, model_id: str, device: str = "cpu"):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        self.device = device
        self.num_layers = self.model.config.num_hidden_layers
        self.hidden_size = self.model.config.hidden_size

    @torch.no_grad()
    def encode(self, text: str) -> np.ndarray:
        enc = self.tokenizer(
            text, return_tensors="pt", truncation=True, max_length=512
        ).to(self.device)
        out = self.model(**enc)
        return out.last_hidden_state.squeeze(0).cpu().numpy().astype(np.float32)


def export_speech_blocks(
    job: ExportJob, encoder: SpeechEncoder | None = None
) -> tuple[dict[str, list[dict]], dict]:
    """Acoustic per-block features for every utterance of every dialogue.

    Returns (feature_refs per dialogue, export log). Block indices outside
    the model's actual depth are rejected.
    """
    if encoder is None:
        encoder = SpeechEncoder(job.models.speech, job.device)
    bad = [b for b in job.blocks if b > encoder.num_blocks]
    if bad:
        raise ExportError(
            f"blocks {bad} beyond model depth {encoder.num_blocks}"
        )
    out_dir = Path(job.output_dir)
    refs: dict[str, list[dict]] = {}
    log: dict = {}
    for dialogue in job.dialogues:
        waveform = load_audio(dialogue.audio_path)
        dialogue_refs = []
        for u, span in enumerate(dialogue.utterances):
            states = encoder.block_states(slice_span(waveform, span.start, span.end))
            for block in job.blocks:
                rel = _rel_path(dialogue.dialogue_id, u, "acoustic", block)
                checksum = write_feature_file(
                    out_dir / rel,
                    dialogue.dialogue_id,
                    u,
                    "acoustic",
                    block,
                    states[block],
                )
                dialogue_refs.append(
                    {
                        "modality": "acoustic",
                        "block_index": block,
                        "path": rel,
                        "checksum": checksum,
                    }
                )
        refs[dialogue.dialogue_id] = dialogue_refs
        log[dialogue.dialogue_id] = {
            "utterances": len(dialogue.utterances),
            "blocks": job.blocks,
            "hidden_size": encoder.hidden_size,
        }
    return refs, log


def export_text_features(
    job: ExportJob,
    transcriber: Transcriber | None = None,
    text_encoder: TextEncoder | None = None,
) -> tuple[dict[str, list[dict]], dict]:
    """ASR transcription + token embeddings per utterance.

    An utterance whose transcription fails falls back to the empty string
    (the encoder still emits its sequence delimiters, so T >= 1 and the
    manifest stays complete); the failure is recorded in the export log.
    """
    if transcriber is None:
        transcriber = Transcriber(job.models.asr, job.device)
    if text_encoder is None:
        text_encoder = TextEncoder(job.models.text, job.device)
    text_block = text_encoder.num_layers
    out_dir = Path(job.output_dir)
    refs: dict[str, list[dict]] = {}
    log: dict = {}
    for dialogue in job.dialogues:
        waveform = load_audio(dialogue.audio_path)
        dialogue_refs = []
        utt_log = []
        for u, span in enumerate(dialogue.utterances):
            try:
                text = transcriber.transcribe(slice_span(waveform, span.start, span.end))
                status = "ok"
            except Exception as exc:  # ASR failure: log, emit empty-text features
                logger.warning(
                    "ASR failed for %s/u%d: %s", dialogue.dialogue_id, u, exc
                )
                text = ""
                status = f"asr-failed: {exc}"
            tokens = text_encoder.encode(text)
            rel = _rel_path(dialogue.dialogue_id, u, "text", text_block)
            checksum = write_feature_file(
                out_dir / rel, dialogue.dialogue_id, u, "text", text_block, tokens
            )
            dialogue_refs.append(
                {
                    "modality": "text",
                    "block_index": text_block,
                    "path": rel,
                    "checksum": checksum,
                }
            )
            utt_log.append({"utterance": u, "status": status, "transcription": text})
        refs[dialogue.dialogue_id] = dialogue_refs
        log[dialogue.dialogue_id] = utt_log
    return refs, log


def run_export(job: ExportJob) -> dict:
    """Full export: requested modalities, manifest, and export log."""
    torch.set_num_threads(max(1, job.torch_threads))
    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    all_refs: dict[str, list[dict]] = {d.dialogue_id: [] for d in job.dialogues}
    full_log: dict = {"modalities": {}}
    if "acoustic" in job.modalities:
        refs, log = export_speech_blocks(job)
        for did, r in refs.items():
            all_refs[did].extend(r)
        full_log["modalities"]["acoustic"] = log
    if "text" in job.modalities:
        refs, log = export_text_features(job)
        for did, r in refs.items():
            all_refs[did].extend(r)
        full_log["modalities"]["text"] = log

    dialogues = []
    for d in job.dialogues:
        dialogues.append(
            {
                "dialogue_id": d.dialogue_id,
                "split": d.split,
                "num_utterances": len(d.utterances),
                "label": d.label,
                "feature_refs": all_refs[d.dialogue_id],
            }
        )
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, job.corpus_id, job.task, dialogues)
    log_path = out_dir / "export_log.json"
    tmp = log_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(full_log, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, log_path)
    return {
        "manifest": str(manifest_path),
        "export_log": str(log_path),
        "num_dialogues": len(dialogues),
        "num_files": sum(len(r) for r in all_refs.values()),
    }
