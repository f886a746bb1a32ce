"""Audio loading: WAV via the stdlib, FLAC via soundfile when installed.

Everything is converted to mono float32 at 16 kHz (polyphase resampling)
before feature extraction.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

TARGET_RATE = 16_000


def _load_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as f:
        rate = f.getframerate()
        n_channels = f.getnchannels()
        width = f.getsampwidth()
        frames = f.readframes(f.getnframes())
    if width == 2:
        data = np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0
    elif width == 4:
        data = np.frombuffer(frames, dtype="<i4").astype(np.float32) / 2147483648.0
    elif width == 1:
        data = (np.frombuffer(frames, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    else:
        raise ValueError(f"{path}: unsupported WAV sample width {width}")
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return data, rate


def load_audio(path: str | Path) -> np.ndarray:
    """Mono float32 waveform at 16 kHz."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"audio file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".wav":
        data, rate = _load_wav(path)
    elif suffix == ".flac":
        try:
            import soundfile
        except ImportError as exc:
            raise RuntimeError(
                f"{path}: FLAC input needs the optional soundfile package"
            ) from exc
        data, rate = soundfile.read(path, dtype="float32", always_2d=True)
        data = data.mean(axis=1)
    else:
        raise ValueError(f"{path}: unsupported audio format {suffix!r}")
    if rate != TARGET_RATE:
        from math import gcd

        g = gcd(rate, TARGET_RATE)
        data = resample_poly(data, TARGET_RATE // g, rate // g).astype(np.float32)
    return np.ascontiguousarray(data, dtype=np.float32)


def slice_span(waveform: np.ndarray, start_s: float, end_s: float) -> np.ndarray:
    """Utterance samples for a [start, end) second span (16 kHz indexing)."""
    lo = int(round(start_s * TARGET_RATE))
    hi = min(int(round(end_s * TARGET_RATE)), len(waveform))
    if hi <= lo:
        raise ValueError(f"empty span [{start_s}, {end_s}) for {len(waveform)} samples")
    return waveform[lo:hi]
