"""Segment-wise time stretch and pitch shift with exact alignment maps.

Time stretch is a phase vocoder (1024-sample hann analysis window, 256-sample
synthesis hop) with identity phase locking: bins follow the nearest magnitude
peak so partials stay coherent. Output length is exactly round(len/rate), so
the piecewise-linear alignment map built from segment lengths is exact, not
approximate. Pitch shift resamples then stretches back to the original length.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import scipy.fft as sp_fft
from scipy.signal import get_window, resample

from .audio import AudioBuffer
from .errors import ContractError, DataError

_PV_WIN = 1024
_PV_HOP = 256  # synthesis hop; analysis hop is rate * this

STRETCH_LIMITS = (0.25, 4.0)
PITCH_LIMITS = 12.0


def _peak_map(mag):
    """Each bin's governing peak: local maxima split the spectrum at midpoints."""
    peaks = np.flatnonzero((mag[1:-1] >= mag[:-2]) & (mag[1:-1] > mag[2:])) + 1
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(mag))])
    bounds = (peaks[:-1] + peaks[1:] + 1) // 2
    return peaks[np.searchsorted(bounds, np.arange(mag.size), side="right")]


def _phase_vocoder(x, rate):
    # single precision throughout: phases are wrapped every frame so no
    # accuracy is lost, and the f32 FFTs are several times faster
    n, hop = _PV_WIN, _PV_HOP
    out_len = int(round(x.size / rate))
    if out_len == 0:
        return np.zeros(0)
    win = get_window("hann", n, fftbins=True).astype(np.float32)
    ra = hop * rate
    n_frames = int(np.ceil(out_len / hop)) + 1
    xp = np.zeros(x.size + n + int(np.ceil(ra)) + 1, dtype=np.float32)
    xp[: x.size] = x
    two_pi = np.float32(2.0 * np.pi)
    omega = np.arange(n // 2 + 1, dtype=np.float32) * np.float32(2.0 * np.pi / n)

    # analysis positions and spectra for every frame at once
    pos = np.minimum(np.round(np.arange(n_frames) * ra).astype(int), xp.size - n)
    spec = sp_fft.rfft(xp[pos[:, None] + np.arange(n)] * win, axis=1)
    mag = np.abs(spec)
    ph = np.angle(spec)

    # per-bin instantaneous frequency between consecutive frames
    dp = np.maximum(np.diff(pos), 1)[:, None].astype(np.float32)
    dev = ph[1:] - ph[:-1] - omega * dp
    dev -= two_pi * np.round(dev / two_pi)
    step = (omega + dev / dp) * np.float32(hop)  # phase advance per synthesis hop

    # governing peak per bin for every frame: nearest local maximum, ties split
    # at midpoints, exactly as _peak_map does one frame at a time
    nb = mag.shape[1]
    bins = np.arange(nb)
    is_peak = np.zeros(mag.shape, dtype=bool)
    is_peak[:, 1:-1] = (mag[:, 1:-1] >= mag[:, :-2]) & (mag[:, 1:-1] > mag[:, 2:])
    no_peak = ~is_peak.any(axis=1)
    if no_peak.any():
        is_peak[no_peak, np.argmax(mag[no_peak], axis=1)] = True
    left = np.maximum.accumulate(np.where(is_peak, bins, -1), axis=1)
    right = np.flip(np.minimum.accumulate(np.flip(np.where(is_peak, bins, nb), 1), 1), 1)
    mid = (left + right + 1) // 2
    gov = np.where(bins < mid, left, right)
    gov[left < 0] = right[left < 0]
    gov[right >= nb] = left[right >= nb]

    # phase recursion: propagate every bin by one hop, then lock to its peak:
    # out_ph[j] = out_ph[j-1][gov] + step[j-1][gov] + (ph[j] - ph[j][gov]).
    # everything except the out_ph gather is frame-local, so batch it
    out_ph = np.empty_like(ph)
    out_ph[0] = ph[0]
    if n_frames > 1:
        gpart = np.take_along_axis(step, gov[1:], axis=1)
        gpart += ph[1:] - np.take_along_axis(ph[1:], gov[1:], axis=1)
        for j in range(1, n_frames):
            p = out_ph[j - 1][gov[j]] + gpart[j - 1]
            p -= two_pi * np.rint(p / two_pi)  # keep f32 phases small and exact
            out_ph[j] = p

    spec_out = np.empty(mag.shape, dtype=np.complex64)
    spec_out.real = mag * np.cos(out_ph)
    spec_out.imag = mag * np.sin(out_ph)
    frames = sp_fft.irfft(spec_out, n, axis=1) * win
    # overlap-add: frame j covers [j*hop, j*hop + n); add hop-sized chunks
    acc = np.zeros((n_frames - 1) * hop + n, dtype=np.float32)
    wsum = np.zeros_like(acc)
    chunks = frames.reshape(n_frames, n // hop, hop)
    w2 = (win * win).reshape(n // hop, hop)
    for i in range(n // hop):
        view = acc[i * hop : i * hop + n_frames * hop].reshape(n_frames, hop)
        view += chunks[:, i, :]
        wview = wsum[i * hop : i * hop + n_frames * hop].reshape(n_frames, hop)
        wview += w2[i]
    return (acc[:out_len] / np.maximum(wsum[:out_len], np.float32(1e-3))).astype(np.float64)


def time_stretch(audio: AudioBuffer, rate: float) -> AudioBuffer:
    """Stretch duration by 1/rate; output has exactly round(len/rate) samples."""
    lo, hi = STRETCH_LIMITS
    if not lo <= rate <= hi:
        raise ContractError(f"stretch rate {rate} outside [{lo}, {hi}]")
    out = _phase_vocoder(audio.samples, rate)
    return AudioBuffer(np.clip(out, -1.0, 1.0), audio.sample_rate)


def pitch_shift(audio: AudioBuffer, semitones: float) -> AudioBuffer:
    """Shift pitch by 2^(semitones/12) without changing duration."""
    if not -PITCH_LIMITS <= semitones <= PITCH_LIMITS:
        raise ContractError(f"pitch shift {semitones} outside +-{PITCH_LIMITS} semitones")
    length = audio.samples.size
    if length == 0 or semitones == 0.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    factor = 2.0 ** (semitones / 12.0)
    resampled = int(round(length / factor))
    shifted = resample(audio.samples.astype(np.float32), resampled)
    shifted = np.clip(shifted, -1.0, 1.0)
    out = time_stretch(AudioBuffer(shifted, audio.sample_rate), resampled / length)
    assert out.samples.size == length
    return out


@dataclass
class AlignmentMap:
    """Piecewise-linear map from original time to augmented time (seconds)."""

    knots: list

    def __post_init__(self):
        k = [(float(a), float(b)) for a, b in self.knots]
        if len(k) < 2:
            raise ContractError("alignment map needs at least two knots")
        if k[0] != (0.0, 0.0):
            raise ContractError(f"first knot must be (0, 0), got {k[0]}")
        for (a0, b0), (a1, b1) in zip(k, k[1:]):
            if a1 <= a0 or b1 <= b0:
                raise ContractError("alignment map knots must strictly increase")
        self.knots = k

    @property
    def original_duration(self):
        return self.knots[-1][0]

    @property
    def augmented_duration(self):
        return self.knots[-1][1]

    def map_time(self, t: float) -> float:
        if not -1e-9 <= t <= self.original_duration + 1e-9:
            raise ContractError(
                f"time {t} outside [0, {self.original_duration}]"
            )
        xs = [a for a, _ in self.knots]
        ys = [b for _, b in self.knots]
        return float(np.interp(min(max(t, 0.0), xs[-1]), xs, ys))

    def to_csv(self, path):
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".csv.tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write("t_orig,t_aug\n")
                for a, b in self.knots:
                    fh.write(f"{a:.6f},{b:.6f}\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def from_csv(cls, path):
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as e:
            raise DataError(f"cannot read alignment map {path}: {e}") from None
        if not rows or rows[0] != ["t_orig", "t_aug"]:
            raise DataError(f"{path}: expected header 't_orig,t_aug'")
        knots = []
        for i, row in enumerate(rows[1:], start=2):
            if len(row) != 2:
                raise DataError(f"{path}:{i}: expected two columns, got {len(row)}")
            try:
                knots.append((float(row[0]), float(row[1])))
            except ValueError:
                raise DataError(f"{path}:{i}: non-numeric value {row}") from None
        try:
            return cls(knots)
        except ContractError as e:
            raise DataError(f"{path}: {e}") from None


@dataclass
class AugmentConfig:
    n_segments: int = 3
    stretch_min: float = 0.8
    stretch_max: float = 1.25
    pitch_semitones: float = 2.0  # one global shift drawn from +-this

    def __post_init__(self):
        lo, hi = STRETCH_LIMITS
        if self.n_segments < 1:
            raise ContractError("n_segments must be >= 1")
        if not lo <= self.stretch_min < self.stretch_max <= hi:
            raise ContractError(
                f"stretch range [{self.stretch_min}, {self.stretch_max}] invalid"
            )
        if not 0.0 <= self.pitch_semitones <= PITCH_LIMITS:
            raise ContractError("pitch_semitones must be in [0, 12]")


def augment_utterance(audio: AudioBuffer, config: AugmentConfig, seed):
    """Split into equal spans, stretch each independently, then pitch-shift.

    Returns (augmented AudioBuffer, AlignmentMap). `seed` may also be a
    numpy Generator, which the trainer uses for splittable per-item streams.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = config.n_segments
    sr = audio.sample_rate
    if audio.duration < 0.1 * n:
        raise ContractError(
            f"utterance too short to augment: {audio.duration:.3f}s < {0.1 * n:.1f}s"
        )
    rates = rng.uniform(config.stretch_min, config.stretch_max, size=n)
    pitch = rng.uniform(-config.pitch_semitones, config.pitch_semitones)
    edges = [round(i * audio.samples.size / n) for i in range(n + 1)]
    pieces = []
    knots = [(0.0, 0.0)]
    aug_samples = 0
    for i in range(n):
        seg = AudioBuffer(audio.samples[edges[i] : edges[i + 1]], sr)
        stretched = time_stretch(seg, rates[i])
        pieces.append(stretched.samples)
        aug_samples += stretched.samples.size
        knots.append((edges[i + 1] / sr, aug_samples / sr))
    out = AudioBuffer(np.concatenate(pieces), sr)
    out = pitch_shift(out, pitch)
    return out, AlignmentMap(knots)
