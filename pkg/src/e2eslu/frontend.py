"""Audio I/O, log-mel features and speed/tempo perturbation."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import wave
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import resample_poly

from .corpus import DatasetManifest, ManifestError, Provenance, UtteranceRecord

logger = logging.getLogger(__name__)

CANONICAL_RATE = 8000
SUPPORTED_RATES = (8000, 16000)
LOG_FLOOR = 1e-10


class FeatureConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM into float32 in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float32) / 32768.0, rate


def to_pcm16(wav: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(wav, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | os.PathLike, wav: np.ndarray, rate: int = CANONICAL_RATE) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = wav if wav.dtype == np.int16 else to_pcm16(wav)
    tmp = path.with_name(path.name + ".tmp")
    with wave.open(str(tmp), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.astype("<i2").tobytes())
    os.replace(tmp, path)
    return path


def load_audio(path: str | os.PathLike) -> np.ndarray:
    """Load a WAV at the canonical 8 kHz rate, downsampling 16 kHz input."""
    wav, rate = read_wav(path)
    if rate == CANONICAL_RATE:
        return wav
    if rate == 16000:
        return resample_poly(wav, 1, 2).astype(np.float32)
    raise FeatureConfigError(f"{path}: unsupported sample rate {rate}")


# ---------------------------------------------------------------------------
# Features


@dataclass(frozen=True)
class FeatureConfig:
    num_mel: int = 40
    window_ms: float = 25.0
    shift_ms: float = 10.0
    preemphasis: float = 0.97
    low_hz: float = 20.0
    high_hz: float | None = None
    mean_norm: bool = True


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift_ms: float
    utterance_id: str = ""
    provenance: Provenance = Provenance.REAL

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def _hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel) / 1127.0)


_MEL_CACHE: dict[tuple, np.ndarray] = {}


def mel_filterbank(num_mel: int, n_fft: int, rate: int, low_hz: float, high_hz: float) -> np.ndarray:
    key = (num_mel, n_fft, rate, low_hz, high_hz)
    if key in _MEL_CACHE:
        return _MEL_CACHE[key]
    bins = np.arange(n_fft // 2 + 1) * rate / n_fft
    mel_bins = _hz_to_mel(bins)
    edges = np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), num_mel + 2)
    fb = np.zeros((num_mel, len(bins)))
    for m in range(num_mel):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        up = (mel_bins - left) / (center - left)
        down = (right - mel_bins) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    _MEL_CACHE[key] = fb
    return fb


def num_frames(num_samples: int, rate: int, config: FeatureConfig = FeatureConfig()) -> int:
    win = int(round(rate * config.window_ms / 1000))
    shift = int(round(rate * config.shift_ms / 1000))
    if num_samples < win:
        return 1
    return (num_samples - win) // shift + 1


def extract_features(
    wav: np.ndarray,
    rate: int = CANONICAL_RATE,
    config: FeatureConfig = FeatureConfig(),
    utterance_id: str = "",
    provenance: Provenance = Provenance.REAL,
) -> FeatureSequence:
    """Log-mel filterbank frames with per-utterance mean normalization.

    Clips shorter than one window are zero-padded to a single frame.
    """
    if rate not in SUPPORTED_RATES:
        raise FeatureConfigError(f"unsupported sample rate {rate}; expected one of {SUPPORTED_RATES}")
    wav = np.asarray(wav, dtype=np.float64).ravel()
    if wav.size == 0:
        raise ValueError("empty waveform")
    win = int(round(rate * config.window_ms / 1000))
    shift = int(round(rate * config.shift_ms / 1000))
    if wav.size < win:
        wav = np.pad(wav, (0, win - wav.size))
    if config.preemphasis:
        wav = np.append(wav[0], wav[1:] - config.preemphasis * wav[:-1])

    n = num_frames(wav.size, rate, config)
    idx = np.arange(win)[None, :] + shift * np.arange(n)[:, None]
    frames = wav[idx] * np.hamming(win)[None, :]
    n_fft = 1 << int(np.ceil(np.log2(win)))
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(config.num_mel, n_fft, rate, config.low_hz, config.high_hz or rate / 2)
    feats = np.log(np.maximum(power @ fb.T, LOG_FLOOR))
    if config.mean_norm:
        feats = feats - feats.mean(axis=0, keepdims=True)
    return FeatureSequence(feats.astype(np.float32), config.shift_ms, utterance_id, provenance)


def features_for_record(record: UtteranceRecord, config: FeatureConfig = FeatureConfig()) -> FeatureSequence:
    if record.audio is None:
        raise ManifestError(f"record {record.id!r} has no audio")
    wav = load_audio(record.audio)
    return extract_features(wav, CANONICAL_RATE, config, record.id, record.provenance)


# Feature cache: b"FEAT" | uint32 T | uint32 D | float32 shift_ms | float32[T*D]
_HEADER = struct.Struct("<4sIIf")


def write_feature_file(path: str | os.PathLike, feats: FeatureSequence) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(b"FEAT", feats.num_frames, feats.dim, feats.frame_shift_ms))
        f.write(np.ascontiguousarray(feats.frames, dtype="<f4").tobytes())
    os.replace(tmp, path)
    return path


def read_feature_file(path: str | os.PathLike, utterance_id: str = "") -> FeatureSequence:
    with open(path, "rb") as f:
        magic, t, d, shift = _HEADER.unpack(f.read(_HEADER.size))
        if magic != b"FEAT":
            raise ValueError(f"{path}: not a feature file")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != t * d:
        raise ValueError(f"{path}: expected {t * d} values, found {data.size}")
    return FeatureSequence(data.reshape(t, d).copy(), float(shift), utterance_id or Path(path).stem)


class FeatureStore:
    """Per-utterance features, memoized in memory and optionally on disk."""

    def __init__(self, config: FeatureConfig = FeatureConfig(), cache_dir: str | os.PathLike | None = None):
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._memo: dict[tuple[str, str], FeatureSequence] = {}

    def get(self, record: UtteranceRecord) -> FeatureSequence:
        key = (record.id, str(record.audio))
        if key in self._memo:
            return self._memo[key]
        feats = None
        cache_path = None
        if self.cache_dir is not None:
            digest = hashlib.sha1(f"{record.audio}|{self.config}".encode()).hexdigest()[:16]
            cache_path = self.cache_dir / f"{record.id}.{digest}.feat"
            if cache_path.exists():
                feats = read_feature_file(cache_path, record.id)
                feats.provenance = record.provenance
        if feats is None:
            feats = features_for_record(record, self.config)
            if cache_path is not None:
                write_feature_file(cache_path, feats)
        self._memo[key] = feats
        return feats

    def batch(self, records: Sequence[UtteranceRecord]) -> list[FeatureSequence]:
        return [self.get(r) for r in records]


# ---------------------------------------------------------------------------
# Perturbation


@dataclass(frozen=True)
class PerturbationPolicy:
    speed_factors: tuple[float, ...] = (0.9, 1.1)
    tempo_factors: tuple[float, ...] = (0.9, 1.1)
    include_original: bool = True

    def __post_init__(self):
        object.__setattr__(self, "speed_factors", tuple(float(f) for f in self.speed_factors))
        object.__setattr__(self, "tempo_factors", tuple(float(f) for f in self.tempo_factors))
        for f in self.speed_factors + self.tempo_factors:
            if not 0.5 <= f <= 2.0:
                raise ValueError(f"perturbation factor {f} outside [0.5, 2.0]")

    @property
    def copies(self) -> int:
        return int(self.include_original) + len(self.speed_factors) + len(self.tempo_factors)

    @classmethod
    def none(cls) -> "PerturbationPolicy":
        return cls((), (), True)


def _ratio(factor: float) -> tuple[int, int]:
    fr = Fraction(factor).limit_denominator(100)
    return fr.numerator, fr.denominator


def speed_perturb(wav: np.ndarray, factor: float) -> np.ndarray:
    """Resample-and-relabel: playing ``factor`` times faster shifts pitch too."""
    num, den = _ratio(factor)
    # output length ~ len / factor: upsample by den, downsample by num
    return resample_poly(np.asarray(wav, dtype=np.float64), den, num).astype(np.float32)


def tempo_perturb(wav: np.ndarray, factor: float, rate: int = CANONICAL_RATE, frame_ms: float = 20.0,
                  tolerance_ms: float = 5.0) -> np.ndarray:
    """Time-stretch by waveform-similarity overlap-add, keeping pitch.

    Output length is ``round(len / factor)`` samples.
    """
    x = np.asarray(wav, dtype=np.float64)
    n_out = int(round(len(x) / factor))
    frame = max(8, int(rate * frame_ms / 1000)) & ~1
    hop = frame // 2
    tol = int(rate * tolerance_ms / 1000)
    window = np.hanning(frame)
    pad = np.pad(x, (tol, frame + tol + int(hop * factor) + 1))

    out = np.zeros(n_out + frame)
    norm = np.zeros(n_out + frame)
    # natural continuation of the previously copied segment
    prev_pos = tol
    k = 0
    while k * hop < n_out:
        target = int(round(k * hop * factor)) + tol
        if k == 0:
            pos = target
        else:
            ref = pad[prev_pos + hop: prev_pos + hop + frame]
            lo, hi = max(0, target - tol), min(len(pad) - frame, target + tol)
            scores = np.correlate(pad[lo: hi + frame], ref, mode="valid")
            pos = lo + int(np.argmax(scores))
        out[k * hop: k * hop + frame] += pad[pos: pos + frame] * window
        norm[k * hop: k * hop + frame] += window
        prev_pos = pos
        k += 1
    norm[norm < 1e-8] = 1.0
    return (out / norm)[:n_out].astype(np.float32)


def _tag(kind: str, factor: float) -> str:
    return f"{kind}{factor:g}"


def perturb(
    manifest: DatasetManifest,
    policy: PerturbationPolicy = PerturbationPolicy(),
    out_dir: str | os.PathLike | None = None,
) -> DatasetManifest:
    """Emit the original plus one speed and one tempo copy per factor.

    Perturbed audio is written to ``out_dir`` as ``<id>-<tag>.wav``. Without
    ``out_dir`` only the manifest arithmetic is performed and perturbed
    records point at the source audio; use that for bookkeeping only.
    """
    manifest.require_audio()
    out = Path(out_dir) if out_dir is not None else None
    records: list[UtteranceRecord] = []
    for r in manifest:
        if policy.include_original:
            records.append(r)
        wav = load_audio(r.audio) if out is not None and policy.copies > int(policy.include_original) else None
        for kind, factors, fn in (("sp", policy.speed_factors, speed_perturb), ("tp", policy.tempo_factors, tempo_perturb)):
            for f in factors:
                new_id = f"{r.id}-{_tag(kind, f)}"
                if wav is not None:
                    y = fn(wav, f)
                    path = write_wav(out / f"{new_id}.wav", y)
                    duration = len(y) / CANONICAL_RATE
                else:
                    path = r.audio
                    duration = r.duration_s / f
                records.append(replace(r, id=new_id, audio=path, duration_s=duration, provenance=Provenance.PERTURBED))
    return manifest.with_records(records)
