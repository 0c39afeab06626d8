"""Source-filter synthetic speech with exactly known unit boundaries.

Each utterance is a glottal-style pulse train (per-speaker f0 with slow
wander) pushed through a cascade of second-order resonators; the resonator
template switches per unit with 10 ms raised-cosine crossfades at the joins,
so boundaries are acoustically real but never clicky. Boundary times are
exact by construction: unit i starts at the cumulative sum of the rounded
unit sample counts. Everything is deterministic given the seed, so a corpus
regenerates byte-identically.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import lfilter

from .audio import AudioBuffer, save_wav
from .errors import ContractError, DataError

_FADE = 160  # samples of crossfade at 16 kHz = 10 ms
_MIN_UNIT_SECONDS = 0.03
_RMS_TARGET = 0.12
_PEAK_LIMIT = 0.95


@dataclass
class UnitTemplate:
    unit_id: int
    resonances: tuple  # ((freq_hz, bandwidth_hz), ...) 2 or 3 of them


@dataclass
class UnitInventory:
    units: list

    def __post_init__(self):
        freqs = [tuple(f for f, _ in u.resonances[:2]) for u in self.units]
        for i in range(len(freqs)):
            for j in range(i + 1, len(freqs)):
                d = np.hypot(freqs[i][0] - freqs[j][0], freqs[i][1] - freqs[j][1])
                if d < 200.0:
                    raise ContractError(
                        f"units {self.units[i].unit_id} and {self.units[j].unit_id} "
                        f"are too similar ({d:.0f} Hz apart in resonance space)"
                    )

    def __len__(self):
        return len(self.units)

    def to_jsonable(self):
        return [
            {"unit_id": u.unit_id, "resonances": [list(r) for r in u.resonances]}
            for u in self.units
        ]

    @classmethod
    def from_jsonable(cls, data):
        return cls(
            [
                UnitTemplate(d["unit_id"], tuple(tuple(r) for r in d["resonances"]))
                for d in data
            ]
        )


@dataclass
class SpeakerParams:
    speaker_id: str
    f0_base: float
    f0_jitter: float        # Hz of slow wander around the base
    resonance_scale: float  # multiplies unit resonance frequencies
    spectral_tilt: float    # dB per octave, applied to the whole utterance

    def to_jsonable(self):
        return asdict(self)

    @classmethod
    def from_jsonable(cls, d):
        return cls(**d)


def make_inventory(n_units, seed) -> UnitInventory:
    """Place pairwise-distinct resonator templates on a jittered hex lattice.

    Rejection sampling stalls near 20 units at this packing density, so the
    lattice guarantees the 200 Hz separation floor; the jitter and a random
    subset of lattice sites keep the draw seed-dependent.
    """
    if n_units < 1:
        raise ContractError("need at least one unit")
    rng = np.random.default_rng([int(seed), 11])
    spacing, jitter = 230.0, 10.0  # 230 - 2*10*sqrt(2) stays above the 200 floor
    row_h = spacing * np.sqrt(3.0) / 2.0
    grid = []
    row = 0
    while True:
        f2 = 1000.0 + row * row_h
        if f2 > 2300.0:
            break
        f1 = 300.0 + (spacing / 2.0 if row % 2 else 0.0)
        while f1 <= 900.0:
            grid.append((f1, f2))
            f1 += spacing
        row += 1
    if n_units > len(grid):
        raise ContractError(f"cannot place {n_units} distinct units; use fewer")
    units = []
    for uid, gi in enumerate(rng.permutation(len(grid))[:n_units]):
        f1 = grid[gi][0] + rng.uniform(-jitter, jitter)
        f2 = grid[gi][1] + rng.uniform(-jitter, jitter)
        res = [(f1, rng.uniform(60.0, 140.0)), (f2, rng.uniform(80.0, 180.0))]
        if rng.random() < 0.7:
            res.append((rng.uniform(2400.0, 3400.0), rng.uniform(120.0, 260.0)))
        units.append(UnitTemplate(uid, tuple(res)))
    return UnitInventory(units)


def make_speakers(n_speakers, seed) -> list:
    """Speakers spread across f0, vocal-tract scale, and spectral tilt."""
    if n_speakers < 1:
        raise ContractError("need at least one speaker")
    rng = np.random.default_rng([int(seed), 23])
    scales = 0.88 + 0.24 * np.arange(n_speakers) / max(n_speakers - 1, 1)
    rng.shuffle(scales)
    out = []
    for i in range(n_speakers):
        f0 = 110.0 + 130.0 * i / max(n_speakers - 1, 1) + rng.uniform(-5.0, 5.0)
        out.append(
            SpeakerParams(
                speaker_id=f"spk{i:02d}",
                f0_base=float(f0),
                f0_jitter=float(rng.uniform(2.0, 6.0)),
                resonance_scale=float(scales[i]),
                spectral_tilt=float(rng.uniform(-6.0, -1.0)),
            )
        )
    return out


def _resonator_ba(freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * freq / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    # normalize for unit gain at the resonance frequency
    w = np.exp(-1j * theta)
    b = np.array([abs(a[0] + a[1] * w + a[2] * w * w)])
    return b, a


def _pulse_train(n, sr, speaker, rng):
    wander_rate = rng.uniform(1.5, 4.0)
    wander_phase = rng.uniform(0.0, 2.0 * np.pi)
    x = np.zeros(n)
    t = 0.0
    while True:
        idx = int(round(t * sr))
        if idx >= n:
            break
        x[idx] = 1.0
        f0 = speaker.f0_base + speaker.f0_jitter * np.sin(
            2.0 * np.pi * wander_rate * t + wander_phase
        )
        t += 1.0 / max(f0, 30.0)
    return x


def _apply_tilt(x, tilt_db_per_oct, sr):
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1.0 / sr)
    gain = 10.0 ** (tilt_db_per_oct * np.log2(np.maximum(f, 50.0) / 500.0) / 20.0)
    return np.fft.irfft(spec * gain, x.size)


def _crossfade_up(length):
    k = np.arange(length)
    return 0.5 * (1.0 - np.cos(np.pi * (k + 0.5) / length))


def generate_utterance(inventory, speaker, units, seed, sample_rate=16000):
    """Render a unit sequence; returns (AudioBuffer, labels).

    `units` is a list of (unit_id, duration_seconds). Labels are
    (start_seconds, unit_id) with starts at the exact cumulative sample
    boundaries. `seed` may be an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not units:
        raise ContractError("unit sequence is empty")
    by_id = {u.unit_id: u for u in inventory.units}
    lengths = []
    for uid, dur in units:
        if uid not in by_id:
            raise ContractError(f"unknown unit id {uid}")
        if dur < _MIN_UNIT_SECONDS:
            raise ContractError(f"unit duration {dur} below {_MIN_UNIT_SECONDS}s")
        lengths.append(int(round(dur * sample_rate)))
    n = int(np.sum(lengths))
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)

    excitation = _pulse_train(n, sample_rate, speaker, rng)
    out = np.zeros(n)
    for i, (uid, _) in enumerate(units):
        stream = excitation
        for freq, bw in by_id[uid].resonances:
            b, a = _resonator_ba(freq * speaker.resonance_scale, bw, sample_rate)
            stream = lfilter(b, a, stream)
        rms = np.sqrt(np.mean(stream * stream))
        stream = stream / max(rms, 1e-9)
        win = np.zeros(n)
        s = starts[i]
        e = starts[i] + lengths[i]
        win[s:e] = 1.0
        if i > 0:  # fade in across the join, half before and half after
            lo, hi = s - _FADE // 2, s + _FADE // 2
            win[lo:hi] = _crossfade_up(_FADE)
            win[:lo] = 0.0
        if i + 1 < len(units):
            lo, hi = e - _FADE // 2, e + _FADE // 2
            win[lo:hi] = 1.0 - _crossfade_up(_FADE)
            win[hi:] = 0.0
        out += stream * win

    out = _apply_tilt(out, speaker.spectral_tilt, sample_rate)
    rms = np.sqrt(np.mean(out * out))
    out *= _RMS_TARGET / max(rms, 1e-9)
    out += 6e-4 * rng.standard_normal(n)  # faint noise floor, keeps spectra honest
    peak = np.max(np.abs(out))
    if peak > _PEAK_LIMIT:
        out *= _PEAK_LIMIT / peak
    labels = [(float(starts[i]) / sample_rate, units[i][0]) for i in range(len(units))]
    return AudioBuffer(out, sample_rate), labels


# ---- label CSV ----------------------------------------------------------


def write_labels(path, labels):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".csv.tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write("start_seconds,unit_id\n")
            for start, uid in labels:
                fh.write(f"{start:.6f},{uid}\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_labels(path):
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read labels {path}: {e}") from None
    if not lines or lines[0] != "start_seconds,unit_id":
        raise DataError(f"{path}: expected header 'start_seconds,unit_id'")
    labels = []
    prev = -1.0
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}:{i}: expected two columns")
        try:
            start, uid = float(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{i}: bad values {line!r}") from None
        if start <= prev:
            raise DataError(f"{path}:{i}: starts must strictly increase")
        prev = start
        labels.append((start, uid))
    if not labels or labels[0][0] != 0.0:
        raise DataError(f"{path}: first label must start at 0.0")
    return labels


# ---- corpus -------------------------------------------------------------


@dataclass
class CorpusConfig:
    minutes: float = 30.0
    n_speakers: int = 4
    n_units: int = 20
    units_per_utterance: tuple = (6, 12)
    duration_range: tuple = (0.08, 0.25)
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if self.minutes <= 0 or self.n_speakers < 1 or self.n_units < 1:
            raise ContractError("corpus config values must be positive")
        lo, hi = self.units_per_utterance
        if lo < 1 or hi < lo:
            raise ContractError("units_per_utterance range invalid")
        lo, hi = self.duration_range
        if lo < _MIN_UNIT_SECONDS or hi < lo:
            raise ContractError("duration_range invalid")


def _atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def generate_corpus(config: CorpusConfig, out_dir):
    """Write wav/, labels/, manifest.jsonl, corpus_meta.json; returns manifest path."""
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    inventory = make_inventory(config.n_units, config.seed)
    speakers = make_speakers(config.n_speakers, config.seed)
    lo_u, hi_u = config.units_per_utterance
    lo_d, hi_d = config.duration_range
    entries = []
    total = 0.0
    i = 0
    while total < config.minutes * 60.0:
        rng = np.random.default_rng([config.seed, 1000, i])
        speaker = speakers[i % len(speakers)]
        n_u = int(rng.integers(lo_u, hi_u + 1))
        seq = [
            (int(rng.integers(0, config.n_units)), float(rng.uniform(lo_d, hi_d)))
            for _ in range(n_u)
        ]
        audio, labels = generate_utterance(
            inventory, speaker, seq, rng, sample_rate=config.sample_rate
        )
        wav_rel = f"wav/utt{i:05d}.wav"
        lab_rel = f"labels/utt{i:05d}.csv"
        save_wav(os.path.join(out_dir, wav_rel), audio)
        write_labels(os.path.join(out_dir, lab_rel), labels)
        entries.append({"audio": wav_rel, "speaker": speaker.speaker_id, "labels": lab_rel})
        total += audio.duration
        i += 1
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    _atomic_write_text(
        manifest_path, "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries)
    )
    meta = {
        "config": asdict(config),
        "inventory": inventory.to_jsonable(),
        "speakers": [s.to_jsonable() for s in speakers],
        "n_utterances": i,
        "total_seconds": round(total, 6),
    }
    _atomic_write_text(
        os.path.join(out_dir, "corpus_meta.json"), json.dumps(meta, indent=2, sort_keys=True)
    )
    return manifest_path


def load_manifest(path):
    """Parse manifest.jsonl; paths come back resolved against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    entries = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{i}: invalid JSON: {exc}") from None
        for key in ("audio", "speaker", "labels"):
            if key not in e:
                raise DataError(f"{path}:{i}: missing key {key!r}")
        e = dict(e)
        e["audio"] = os.path.join(base, e["audio"])
        e["labels"] = os.path.join(base, e["labels"])
        entries.append(e)
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return entries


def load_corpus_meta(corpus_dir):
    path = os.path.join(str(corpus_dir), "corpus_meta.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read corpus metadata: {e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from None


# ---- ABX triples ----------------------------------------------------------


@dataclass
class AbxTriple:
    a: AudioBuffer
    b: AudioBuffer
    x: AudioBuffer
    condition: str  # "within" or "across"
    center_a: int
    center_b: int


def generate_abx_triples(corpus_dir, n_triples, seed):
    """Synthesize fresh A/B/X trios from the corpus inventory and speakers.

    A and X share the same unit sequence (different renderings); B swaps the
    center unit. "within" keeps X on A's speaker, "across" moves X to another.
    """
    meta = load_corpus_meta(corpus_dir)
    inventory = UnitInventory.from_jsonable(meta["inventory"])
    speakers = [SpeakerParams.from_jsonable(s) for s in meta["speakers"]]
    sr = meta["config"]["sample_rate"]
    if len(speakers) < 2 or len(inventory) < 2:
        raise DataError(
            f"corpus too uniform for ABX: {len(speakers)} speakers, "
            f"{len(inventory)} units (need at least 2 of each)"
        )
    if n_triples < 1:
        raise ContractError("n_triples must be >= 1")
    triples = []
    for k in range(n_triples):
        rng = np.random.default_rng([int(seed), 2000, k])
        condition = "within" if k % 2 == 0 else "across"
        spk_ab = speakers[int(rng.integers(0, len(speakers)))]
        others = [s for s in speakers if s.speaker_id != spk_ab.speaker_id]
        spk_x = spk_ab if condition == "within" else others[int(rng.integers(0, len(others)))]
        uc, ub = rng.choice(len(inventory), size=2, replace=False)
        u1 = int(rng.integers(0, len(inventory)))
        u2 = int(rng.integers(0, len(inventory)))

        def render(speaker, center):
            durs = rng.uniform(0.1, 0.2, size=3)
            seq = [(u1, durs[0]), (int(center), durs[1]), (u2, durs[2])]
            return generate_utterance(inventory, speaker, seq, rng, sample_rate=sr)[0]

        triples.append(
            AbxTriple(
                a=render(spk_ab, uc),
                b=render(spk_ab, ub),
                x=render(spk_x, uc),
                condition=condition,
                center_a=int(uc),
                center_b=int(ub),
            )
        )
    return triples
