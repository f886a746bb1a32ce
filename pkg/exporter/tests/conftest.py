"""Offline model fixtures: locally-built snapshots, no hub access.

The speech model is a BASE-class architecture (12 encoder blocks, 768-d
hidden states) with slimmed convolution/FFN widths so tests stay fast; the
ASR and text models are tiny randomly-initialized stand-ins with
handcrafted tokenizers. Weights are random but pinned to disk, which is
exactly what "pinned model revision" means to the exporter.
"""

import json
import math
import os
import struct
import wave

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

import numpy as np
import pytest
import torch


@pytest.fixture(scope="session")
def speech_model_dir(tmp_path_factory):
    from transformers import Wav2Vec2Config, Wav2Vec2FeatureExtractor, Wav2Vec2Model

    path = tmp_path_factory.mktemp("speech_model")
    cfg = Wav2Vec2Config(
        hidden_size=768,
        num_hidden_layers=12,
        num_attention_heads=12,
        intermediate_size=512,
        conv_dim=(64,) * 7,
    )
    torch.manual_seed(20240811)
    model = Wav2Vec2Model(cfg)
    model.save_pretrained(path)
    Wav2Vec2FeatureExtractor().save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def asr_model_dir(tmp_path_factory):
    from transformers import (
        WhisperConfig,
        WhisperFeatureExtractor,
        WhisperForConditionalGeneration,
        WhisperTokenizer,
    )

    path = tmp_path_factory.mktemp("asr_model")
    specials = [
        "<|endoftext|>",
        "<|startoftranscript|>",
        "<|en|>",
        "<|transcribe|>",
        "<|notimestamps|>",
    ]
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)] + [" ", ".", ","]
    vocab = {t: i for i, t in enumerate(specials + letters)}
    (path / "vocab.json").write_text(json.dumps(vocab))
    (path / "merges.txt").write_text("#version: 0.2\n")
    tokenizer = WhisperTokenizer(
        str(path / "vocab.json"),
        str(path / "merges.txt"),
        unk_token="<|endoftext|>",
        bos_token="<|endoftext|>",
        eos_token="<|endoftext|>",
        pad_token="<|endoftext|>",
    )
    tokenizer.add_special_tokens({"additional_special_tokens": specials[1:]})
    tokenizer.save_pretrained(path)
    cfg = WhisperConfig(
        vocab_size=len(vocab),
        d_model=64,
        encoder_layers=2,
        decoder_layers=2,
        encoder_attention_heads=2,
        decoder_attention_heads=2,
        encoder_ffn_dim=128,
        decoder_ffn_dim=128,
        decoder_start_token_id=vocab["<|startoftranscript|>"],
        eos_token_id=vocab["<|endoftext|>"],
        pad_token_id=vocab["<|endoftext|>"],
        bos_token_id=vocab["<|endoftext|>"],
        max_source_positions=1500,
        max_target_positions=64,
    )
    torch.manual_seed(7)
    model = WhisperForConditionalGeneration(cfg)
    model.generation_config.forced_decoder_ids = None
    model.save_pretrained(path)
    WhisperFeatureExtractor().save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def text_model_dir(tmp_path_factory):
    from transformers import BertConfig, BertModel, BertTokenizer

    path = tmp_path_factory.mktemp("text_model")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + [
        chr(c) for c in range(ord("a"), ord("z") + 1)
    ]
    (path / "vocab.txt").write_text("\n".join(vocab))
    tokenizer = BertTokenizer(str(path / "vocab.txt"))
    tokenizer.save_pretrained(path)
    cfg = BertConfig(
        vocab_size=len(vocab),
        hidden_size=768,
        num_hidden_layers=2,
        num_attention_heads=12,
        intermediate_size=512,
    )
    torch.manual_seed(8)
    BertModel(cfg).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def wav_fixture(tmp_path_factory):
    """3-second 16 kHz mono PCM16 WAV: three 1-second utterances."""
    path = tmp_path_factory.mktemp("audio") / "dialogue.wav"
    rate = 16_000
    rng = np.random.default_rng(3)
    t = np.arange(rate) / rate
    chunks = [
        0.4 * np.sin(2 * math.pi * 220 * t),
        0.3 * np.sin(2 * math.pi * 440 * t) + 0.05 * rng.normal(size=rate),
        0.2 * rng.normal(size=rate),
    ]
    samples = np.concatenate(chunks)
    pcm = np.clip(samples * 32767, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())
    return str(path)


@pytest.fixture()
def base_job(speech_model_dir, asr_model_dir, text_model_dir, wav_fixture, tmp_path):
    from xferlab_exporter.jobs import ExportJob

    return ExportJob.model_validate(
        {
            "corpus_id": "fixture-corpus",
            "task": "ad",
            "models": {
                "speech": speech_model_dir,
                "asr": asr_model_dir,
                "text": text_model_dir,
            },
            "blocks": list(range(13)),
            "modalities": ["acoustic"],
            "output_dir": str(tmp_path / "out"),
            "dialogues": [
                {
                    "dialogue_id": "dlg-0",
                    "audio_path": wav_fixture,
                    "split": "train",
                    "label": {"ad_positive": True},
                    "utterances": [
                        {"start": 0.0, "end": 1.0},
                        {"start": 1.0, "end": 2.0},
                        {"start": 2.0, "end": 3.0},
                    ],
                }
            ],
        }
    )
