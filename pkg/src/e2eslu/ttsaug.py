"""Text-to-speech augmentation: turn text-only intent data into speech.

Three backends share one contract (one 8 kHz WAV per requested id):

* ``StubBackend`` renders each character as a short two-tone pattern whose
  base modulation frequency, formant scaling and speaking rate depend on the
  speaker. Trivial acoustically, but distinct per transcript and learnable.
* ``ExternalCommandBackend`` shells out to ``<cmd> <requests.tsv> <out_dir>``.
  The request file has lines ``<id>\\t<speaker>\\t<text>``; the command must
  write ``<id>.wav`` (16-bit mono PCM, 8 or 16 kHz) for each line.
* ``PreSynthesizedDirBackend`` picks up ``<id>.wav`` files from a directory.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import resample_poly

from .corpus import DatasetManifest, ManifestError, Provenance, UtteranceRecord
from .frontend import CANONICAL_RATE, read_wav, write_wav

logger = logging.getLogger(__name__)

MAX_DROP_FRACTION = 0.05

_SYMBOLS = "abcdefghijklmnopqrstuvwxyz'"
_LOW_TONES = (300.0, 420.0, 560.0, 720.0, 900.0, 1120.0)
_HIGH_TONES = (1450.0, 1800.0, 2200.0, 2650.0, 3150.0)
# deterministic scramble so neighbouring letters do not share both tones
_ORDER = np.random.default_rng(1234).permutation(len(_LOW_TONES) * len(_HIGH_TONES))
_TONES = {
    ch: (_LOW_TONES[_ORDER[i] % len(_LOW_TONES)], _HIGH_TONES[_ORDER[i] // len(_LOW_TONES)])
    for i, ch in enumerate(_SYMBOLS)
}


class SynthesisError(RuntimeError):
    pass


def _digest_int(*parts: object) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


@dataclass(frozen=True)
class StubVoice:
    base_hz: float
    formant_scale: float
    char_s: float
    noise: float

    @classmethod
    def for_speaker(cls, speaker: str) -> "StubVoice":
        rng = np.random.default_rng(_digest_int("voice", speaker))
        return cls(
            base_hz=float(rng.uniform(95.0, 230.0)),
            formant_scale=float(rng.uniform(0.95, 1.05)),
            char_s=float(rng.uniform(0.028, 0.036)),
            noise=float(rng.uniform(0.002, 0.01)),
        )


def render_stub(text: str, speaker: str, seed: int = 0, rate: int = CANONICAL_RATE) -> np.ndarray:
    """Deterministic int16 waveform for ``text`` as spoken by ``speaker``."""
    voice = StubVoice.for_speaker(speaker)
    rng = np.random.default_rng(_digest_int("render", text, speaker, seed))
    lead = int(0.08 * rate)
    pieces = [np.zeros(lead)]
    ramp_n = int(0.003 * rate)
    for ch in text.lower():
        n = max(ramp_n * 3, int(round(voice.char_s * rng.uniform(0.85, 1.15) * rate)))
        if ch not in _TONES:
            pieces.append(np.zeros(n))
            continue
        t = np.arange(n) / rate
        lo, hi = _TONES[ch]
        lo *= voice.formant_scale
        hi *= voice.formant_scale
        carrier = np.sin(2 * np.pi * lo * t + rng.uniform(0, 2 * np.pi)) + 0.7 * np.sin(
            2 * np.pi * hi * t + rng.uniform(0, 2 * np.pi)
        )
        seg = carrier * (0.65 + 0.35 * np.cos(2 * np.pi * voice.base_hz * t))
        env = np.ones(n)
        env[:ramp_n] = np.linspace(0, 1, ramp_n)
        env[-ramp_n:] = np.linspace(1, 0, ramp_n)
        pieces.append(0.25 * rng.uniform(0.8, 1.2) * seg * env)
    pieces.append(np.zeros(lead))
    wav = np.concatenate(pieces)
    wav = wav + voice.noise * rng.standard_normal(wav.size)
    if rate != CANONICAL_RATE:
        wav = resample_poly(wav, rate, CANONICAL_RATE)
    return np.clip(np.round(wav * 32767), -32768, 32767).astype(np.int16)


@dataclass(frozen=True)
class SynthesisRequest:
    id: str
    text: str
    speaker: str


@dataclass(frozen=True)
class SynthesisJob:
    requests: tuple[SynthesisRequest, ...]
    seed: int

    @classmethod
    def plan(cls, records: Sequence[UtteranceRecord], speaker_pool: Sequence[str], seed: int,
             id_prefix: str = "") -> "SynthesisJob":
        """Pick a speaker uniformly at random for every sentence."""
        if not speaker_pool:
            raise ValueError("speaker pool is empty")
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, len(speaker_pool), size=len(records))
        return cls(
            tuple(SynthesisRequest(id_prefix + r.id, r.transcript, speaker_pool[int(k)]) for r, k in zip(records, picks)),
            seed,
        )


class TtsBackend:
    kind = "abstract"
    sample_rate_out = CANONICAL_RATE

    def __init__(self, speaker_pool: Sequence[str]):
        self.speaker_pool = list(speaker_pool)

    def render(self, job: SynthesisJob, out_dir: Path) -> dict[str, Path]:
        """Return produced files by request id; absent ids count as failures."""
        raise NotImplementedError


class StubBackend(TtsBackend):
    kind = "deterministic_stub"

    def __init__(self, speaker_pool: Sequence[str] = tuple(f"tts{i:02d}" for i in range(10)), rate: int = CANONICAL_RATE):
        super().__init__(speaker_pool)
        self.rate = rate

    def render(self, job: SynthesisJob, out_dir: Path) -> dict[str, Path]:
        produced = {}
        for req in job.requests:
            wav = render_stub(req.text, req.speaker, job.seed, self.rate)
            produced[req.id] = write_wav(out_dir / f"{req.id}.wav", wav, self.rate)
        return produced


class ExternalCommandBackend(TtsBackend):
    kind = "external_command"

    def __init__(self, command: Sequence[str], speaker_pool: Sequence[str], timeout_s: float | None = None):
        super().__init__(speaker_pool)
        self.command = list(command)
        self.timeout_s = timeout_s

    def render(self, job: SynthesisJob, out_dir: Path) -> dict[str, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile("w", suffix=".tsv", delete=False, encoding="utf-8") as f:
            for req in job.requests:
                f.write(f"{req.id}\t{req.speaker}\t{req.text}\n")
            request_file = f.name
        try:
            proc = subprocess.run(
                self.command + [request_file, str(out_dir)], capture_output=True, text=True, timeout=self.timeout_s
            )
        finally:
            os.unlink(request_file)
        if proc.returncode != 0:
            raise SynthesisError(f"TTS command exited with {proc.returncode}: {proc.stderr.strip()[:500]}")
        return {req.id: out_dir / f"{req.id}.wav" for req in job.requests if (out_dir / f"{req.id}.wav").exists()}


class PreSynthesizedDirBackend(TtsBackend):
    kind = "pre_synthesized_dir"

    def __init__(self, directory: str | os.PathLike, speaker_pool: Sequence[str] = ("presynth",)):
        super().__init__(speaker_pool)
        self.directory = Path(directory)

    def render(self, job: SynthesisJob, out_dir: Path) -> dict[str, Path]:
        produced = {}
        for req in job.requests:
            src = self.directory / f"{req.id}.wav"
            if src.exists():
                produced[req.id] = src
        return produced


def _to_canonical(src: Path, dest: Path) -> int:
    """Copy ``src`` into ``dest`` at 8 kHz; return the sample count."""
    wav, rate = read_wav(src)
    if rate == 16000:
        wav = resample_poly(wav.astype(np.float64), 1, 2)
        write_wav(dest, wav, CANONICAL_RATE)
    elif rate == CANONICAL_RATE:
        if src.resolve() != dest.resolve():
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dest)
    else:
        raise SynthesisError(f"{src}: unsupported sample rate {rate}")
    return len(wav)


def synthesize(
    text_data: DatasetManifest,
    backend: TtsBackend,
    seed: int,
    out_dir: str | os.PathLike,
    id_prefix: str = "tts-",
) -> DatasetManifest:
    """Render every transcript with a randomly chosen speaker.

    Records whose audio cannot be produced are dropped and counted; if more
    than 5% are dropped the whole job fails.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    job = SynthesisJob.plan(list(text_data), backend.speaker_pool, seed, id_prefix)
    produced = backend.render(job, out)

    records = []
    dropped = []
    for rec, req in zip(text_data, job.requests):
        src = produced.get(req.id)
        if src is None:
            dropped.append(req.id)
            continue
        dest = out / f"{req.id}.wav"
        try:
            n = _to_canonical(src, dest)
        except (SynthesisError, ValueError, OSError) as exc:
            logger.warning("dropping %s: %s", req.id, exc)
            dropped.append(req.id)
            continue
        if n == 0:
            dropped.append(req.id)
            continue
        records.append(
            replace(rec, id=req.id, audio=dest.resolve(), duration_s=n / CANONICAL_RATE, speaker=req.speaker,
                    provenance=Provenance.SYNTHETIC)
        )
    if dropped:
        logger.warning("TTS dropped %d of %d records", len(dropped), len(text_data))
        if len(dropped) > MAX_DROP_FRACTION * max(1, len(text_data)):
            raise SynthesisError(f"TTS failed on {len(dropped)} of {len(text_data)} records (limit 5%)")
    return text_data.with_records(records, split_name=f"{text_data.split_name}-tts")


def merge_for_training(real: DatasetManifest, synthetic: DatasetManifest) -> DatasetManifest:
    """Concatenate real and synthetic records; ids must be disjoint."""
    clash = set(real.ids) & set(synthetic.ids)
    if clash:
        raise ManifestError(f"{len(clash)} id collisions between real and synthetic data, e.g. {sorted(clash)[0]!r}")
    vocab = real.intent_vocab.union(synthetic.intent_vocab)
    return DatasetManifest(real.records + synthetic.records, f"{real.split_name}+{synthetic.split_name}", vocab)
