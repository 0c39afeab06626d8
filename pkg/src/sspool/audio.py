"""AudioBuffer container and 16-bit PCM WAV I/O (stdlib wave module only)."""

from __future__ import annotations

import os
import tempfile
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

_SCALE = 32768.0  # int16 full scale; +1.0 saturates to 32767/32768


@dataclass
class AudioBuffer:
    """Mono audio as float64 samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ContractError(f"audio must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ContractError("audio samples must be finite")
        if self.samples.size and (self.samples.min() < -1.0 or self.samples.max() > 1.0):
            raise ContractError("audio samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def float_to_pcm16(x):
    """Round to the int16 grid, saturating at the rails."""
    i = np.round(np.asarray(x, dtype=np.float64) * _SCALE)
    return np.clip(i, -32768, 32767).astype(np.int16)


def pcm16_to_float(i):
    return np.asarray(i, dtype=np.float64) / _SCALE


def save_wav(path, audio: AudioBuffer):
    """Write mono 16-bit PCM. The write is atomic (temp file + rename)."""
    pcm = float_to_pcm16(audio.samples)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".wav.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            with wave.open(fh, "wb") as w:
                w.setnchannels(1)
                w.setsampwidth(2)
                w.setframerate(audio.sample_rate)
                w.writeframes(pcm.astype("<i2").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM WAV file; anything else raises DataError."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except FileNotFoundError:
        raise DataError(f"no such audio file: {path}") from None
    except (wave.Error, EOFError) as e:
        raise DataError(f"unreadable WAV file {path}: {e}") from None
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if len(raw) < 2 * n:
        raise DataError(f"{path}: truncated data chunk ({len(raw)} bytes for {n} frames)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm16_to_float(pcm), sample_rate=rate)
