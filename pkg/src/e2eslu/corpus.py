"""Utterance records, manifests and intent vocabularies.

A manifest file is UTF-8 JSON lines, one record per line::

    {"id": "u1", "audio": "wav/u1.wav", "text": "check my bill",
     "intents": ["billing"], "speaker": "spk01", "duration_s": 1.2,
     "provenance": "real"}

Audio paths are stored relative to the manifest file and resolved to
absolute paths on load.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

UNSEEN = "<unseen>"


class Provenance(str, Enum):
    REAL = "real"
    PERTURBED = "perturbed"
    SYNTHETIC = "synthetic"


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CoverageError(ValueError):
    """Raised when a subset cannot keep every frequent intent class."""

    def __init__(self, missing: Sequence[str]):
        super().__init__(f"subset drops intent classes: {', '.join(sorted(missing))}")
        self.missing = sorted(missing)


class VocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    transcript: str
    intents: tuple[str, ...]
    speaker: str = ""
    audio: Path | None = None
    duration_s: float = 0.0
    provenance: Provenance = Provenance.REAL

    def __post_init__(self):
        if not self.id:
            raise ManifestError("record id is empty")
        if not self.transcript.strip():
            raise ManifestError(f"record {self.id!r} has an empty transcript")
        if self.duration_s < 0:
            raise ManifestError(f"record {self.id!r} has negative duration")
        if (self.audio is not None) != (self.duration_s > 0):
            raise ManifestError(f"record {self.id!r}: audio must be present iff duration_s > 0")
        object.__setattr__(self, "intents", tuple(self.intents))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def words(self) -> list[str]:
        return self.transcript.split()

    @property
    def intent(self) -> str:
        """The single intent of a training record."""
        if len(self.intents) != 1:
            raise ManifestError(f"record {self.id!r} has {len(self.intents)} intents, expected 1")
        return self.intents[0]

    def to_json(self, base_dir: Path | None = None) -> dict:
        audio = None
        if self.audio is not None:
            audio = str(self.audio)
            if base_dir is not None:
                audio = os.path.relpath(self.audio, base_dir)
        return {
            "id": self.id,
            "audio": audio,
            "text": self.transcript,
            "intents": list(self.intents),
            "speaker": self.speaker,
            "duration_s": self.duration_s,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path | None = None) -> "UtteranceRecord":
        audio = obj.get("audio")
        if audio is not None:
            audio = Path(audio)
            if base_dir is not None and not audio.is_absolute():
                audio = (base_dir / audio).resolve()
        intents = obj.get("intents", [])
        if not isinstance(intents, list):
            raise ManifestError("'intents' must be a list")
        return cls(
            id=str(obj["id"]),
            transcript=str(obj["text"]),
            intents=tuple(str(i) for i in intents),
            speaker=str(obj.get("speaker", "")),
            audio=audio,
            duration_s=float(obj.get("duration_s", 0.0)),
            provenance=Provenance(obj.get("provenance", "real")),
        )


class IntentVocabulary:
    """Ordered, bijective mapping between intent labels and class indices."""

    def __init__(self, labels: Iterable[str] = ()):
        self.labels: list[str] = []
        self._index: dict[str, int] = {}
        for label in labels:
            if label in self._index:
                raise VocabularyError(f"duplicate intent label {label!r}")
            self._index[label] = len(self.labels)
            self.labels.append(label)

    @classmethod
    def from_records(cls, records: Iterable[UtteranceRecord]) -> "IntentVocabulary":
        seen: dict[str, None] = {}
        for r in records:
            for label in r.intents:
                if label != UNSEEN:
                    seen.setdefault(label, None)
        return cls(sorted(seen))

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, IntentVocabulary) and self.labels == other.labels

    def __repr__(self) -> str:
        return f"IntentVocabulary({self.labels!r})"

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise VocabularyError(f"intent {label!r} is not in the vocabulary") from None

    def label(self, index: int) -> str:
        return self.labels[index]

    def union(self, other: "IntentVocabulary") -> "IntentVocabulary":
        return IntentVocabulary(sorted(set(self.labels) | set(other.labels)))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[UtteranceRecord, ...] = ()
    split_name: str = ""
    intent_vocab: IntentVocabulary = field(default_factory=IntentVocabulary)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    @classmethod
    def from_records(
        cls,
        records: Iterable[UtteranceRecord],
        split_name: str = "",
        intent_vocab: IntentVocabulary | None = None,
    ) -> "DatasetManifest":
        records = tuple(records)
        if intent_vocab is None:
            intent_vocab = IntentVocabulary.from_records(records)
        return cls(records, split_name, intent_vocab)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> UtteranceRecord:
        return self.records[i]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def total_duration_s(self) -> float:
        return float(sum(r.duration_s for r in self.records))

    def with_records(self, records: Iterable[UtteranceRecord], split_name: str | None = None) -> "DatasetManifest":
        """New manifest sharing this one's intent vocabulary."""
        return DatasetManifest(tuple(records), self.split_name if split_name is None else split_name, self.intent_vocab)

    def require_audio(self) -> None:
        for r in self.records:
            if r.audio is None:
                raise ManifestError(f"record {r.id!r} has no audio")

    def require_single_intent(self) -> None:
        for r in self.records:
            if len(r.intents) != 1:
                raise ManifestError(f"training record {r.id!r} has {len(r.intents)} intents; training manifests are single-intent")

    def dumps(self, base_dir: Path | None = None) -> str:
        return "".join(json.dumps(r.to_json(base_dir), ensure_ascii=False) + "\n" for r in self.records)

    def content_hash(self) -> str:
        """Stable digest over record content (absolute audio paths)."""
        h = hashlib.sha256()
        h.update(self.dumps().encode("utf-8"))
        return h.hexdigest()


def parse_manifest(text: str, base_dir: Path | None = None, split_name: str = "") -> DatasetManifest:
    records: list[UtteranceRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise ManifestError("record must be a JSON object", lineno)
        try:
            record = UtteranceRecord.from_json(obj, base_dir)
        except ManifestError as exc:
            raise ManifestError(str(exc), lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad record: {exc!r}", lineno) from None
        if record.id in seen:
            raise ManifestError(f"duplicate id {record.id!r} (first seen on line {seen[record.id]})", lineno)
        seen[record.id] = lineno
        records.append(record)
    return DatasetManifest.from_records(records, split_name)


def load_manifest(path: str | os.PathLike, split_name: str | None = None) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, path.parent.resolve(), split_name if split_name is not None else path.stem)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Write atomically; audio paths become relative to the file's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(manifest.dumps(path.parent.resolve()), encoding="utf-8")
    os.replace(tmp, path)
    return path


def subset(
    manifest: DatasetManifest,
    fraction: float,
    seed: int,
    min_class_count: int = 10,
    max_attempts: int = 100,
) -> DatasetManifest:
    """Select ``floor(fraction * N)`` records by seeded shuffle.

    Relative order is preserved. Any intent with at least ``min_class_count``
    members must keep one; otherwise the next seed is tried, up to
    ``max_attempts`` seeds.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(manifest)
    k = int(np.floor(fraction * n + 1e-9))
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n} records selects nothing")
    if k == n:
        return manifest

    counts: dict[str, int] = {}
    for r in manifest:
        for label in r.intents:
            counts[label] = counts.get(label, 0) + 1
    required = {label for label, c in counts.items() if c >= min_class_count}

    missing: set[str] = set()
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed + attempt)
        chosen = np.sort(rng.permutation(n)[:k])
        picked = [manifest.records[i] for i in chosen]
        covered = {label for r in picked for label in r.intents}
        missing = required - covered
        if not missing:
            return manifest.with_records(picked)
    raise CoverageError(sorted(missing))


def text_only_view(manifest: DatasetManifest) -> DatasetManifest:
    return manifest.with_records(replace(r, audio=None, duration_s=0.0) for r in manifest)


def complement(manifest: DatasetManifest, part: DatasetManifest) -> DatasetManifest:
    taken = set(part.ids)
    return manifest.with_records(r for r in manifest if r.id not in taken)
