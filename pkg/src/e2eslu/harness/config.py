"""Experiment configuration: data assignments, hyperparameters, pipeline choice.

A config file is YAML (or JSON) with a tree mirroring :class:`ExperimentConfig`::

    name: e2e-10pct-s1
    pipeline: e2e            # cascade | e2e | e2e_joint | e2e_tts | e2e_joint_tts
    seed: 1
    label: e2e @10%          # rows sharing a label are averaged in reports
    reference: low           # optional: low | full, anchors the recovery metric
    data:
      am_pretrain: {manifest: asr.jsonl}
      am_adapt:    {manifest: train.jsonl, fraction: 0.1, seed: 1}
      s2i:         {manifest: train.jsonl, fraction: 0.1, seed: 1}
      test:        {manifest: test.jsonl}
    encoder: {layers: 2, hidden_per_direction: 64, subsample: 2}
    s2i: {epochs: 40, lr: 0.001}

Manifest paths are resolved relative to the config file. A matrix file has
an optional ``defaults`` mapping deep-merged into every entry of
``experiments``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from ..am_ctc.encoder import EncoderConfig
from ..frontend import FeatureConfig
from ..joint import JointTrainConfig
from ..s2i import MultiTaskConfig
from ..t2i.model import TextEncoderConfig
from ..t2i.train import IntentFinetuneConfig, MLMConfig
from ..training import TrainConfig


class ConfigError(ValueError):
    pass


class Pipeline(str, Enum):
    CASCADE = "cascade"
    E2E = "e2e"
    E2E_JOINT = "e2e_joint"
    E2E_TTS = "e2e_tts"
    E2E_JOINT_TTS = "e2e_joint_tts"

    @property
    def uses_tts(self) -> bool:
        return self in (Pipeline.E2E_TTS, Pipeline.E2E_JOINT_TTS)

    @property
    def uses_joint(self) -> bool:
        return self in (Pipeline.E2E_JOINT, Pipeline.E2E_JOINT_TTS)


# data components each pipeline reads
REQUIRED_DATA = {
    Pipeline.CASCADE: ("am_pretrain", "am_adapt", "lm", "t2i", "test"),
    Pipeline.E2E: ("am_pretrain", "am_adapt", "s2i", "test"),
    Pipeline.E2E_JOINT: ("am_pretrain", "am_adapt", "s2i", "t2i", "test"),
    Pipeline.E2E_TTS: ("am_pretrain", "am_adapt", "s2i", "tts_source", "test"),
    Pipeline.E2E_JOINT_TTS: ("am_pretrain", "am_adapt", "s2i", "t2i", "tts_source", "test"),
}
DATA_COMPONENTS = ("am_pretrain", "am_adapt", "lm", "t2i", "s2i", "joint", "tts_source", "heldout", "dev", "test")


@dataclass(frozen=True)
class DataAssignment:
    manifest: str
    fraction: float = 1.0
    seed: int | None = None  # None: the experiment seed

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")


@dataclass
class PerturbConfig:
    speed_factors: tuple[float, ...] = (0.9, 1.1)
    tempo_factors: tuple[float, ...] = (0.9, 1.1)
    # training on real + synthetic speech skips perturbation unless overridden
    with_tts: bool = False


@dataclass
class TtsConfig:
    backend: str = "stub"  # stub | external_command | pre_synthesized_dir
    speakers: tuple[str, ...] = tuple(f"tts{i:02d}" for i in range(10))
    command: tuple[str, ...] = ()
    directory: str = ""
    seed: int | None = None


@dataclass
class CascadeConfig:
    lm_order: int = 3
    lm_k: float = 0.01
    mode: str = "prefix_beam"
    beam: int = 8
    lm_weight: float = 0.3


@dataclass
class ExperimentConfig:
    name: str
    pipeline: Pipeline
    data: dict[str, DataAssignment]
    seed: int = 0
    label: str = ""
    reference: str | None = None
    units: str = "grapheme"
    embed_dim: int | None = None
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    am_pretrain: TrainConfig = field(default_factory=TrainConfig)
    am_adapt: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3))
    s2i: MultiTaskConfig = field(default_factory=MultiTaskConfig)
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    mlm: MLMConfig = field(default_factory=MLMConfig)
    t2i: IntentFinetuneConfig = field(default_factory=IntentFinetuneConfig)
    joint: JointTrainConfig = field(default_factory=JointTrainConfig)
    perturb: PerturbConfig | None = field(default_factory=PerturbConfig)
    tts: TtsConfig = field(default_factory=TtsConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    base_dir: str = "."

    def __post_init__(self):
        self.pipeline = Pipeline(self.pipeline)
        self.label = self.label or self.name
        if self.reference not in (None, "low", "full"):
            raise ConfigError(f"reference must be 'low' or 'full', got {self.reference!r}")
        for key in self.data:
            if key not in DATA_COMPONENTS:
                raise ConfigError(f"unknown data component {key!r}")
        missing = [k for k in REQUIRED_DATA[self.pipeline] if k not in self.data]
        if missing:
            raise ConfigError(f"{self.name}: pipeline {self.pipeline.value} needs data for {', '.join(missing)}")
        if self.units not in ("grapheme", "phone"):
            raise ConfigError(f"units must be grapheme or phone, got {self.units!r}")

    def manifest_path(self, component: str) -> Path:
        p = Path(self.data[component].manifest)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def check_manifests(self) -> None:
        for key in self.data:
            if not self.manifest_path(key).exists():
                raise ConfigError(f"{self.name}: manifest for {key} not found: {self.manifest_path(key)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pipeline"] = self.pipeline.value
        d.pop("base_dir")
        return _plain(d)

    def config_hash(self) -> str:
        """Digest of the full config (paths as written, not resolved)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(obj: Any) -> Any:
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "features": FeatureConfig, "encoder": EncoderConfig, "am_pretrain": TrainConfig, "am_adapt": TrainConfig,
    "s2i": MultiTaskConfig, "text_encoder": TextEncoderConfig, "mlm": MLMConfig, "t2i": IntentFinetuneConfig,
    "joint": JointTrainConfig, "tts": TtsConfig, "cascade": CascadeConfig,
}


_SEEDED = ("am_pretrain", "am_adapt", "s2i", "mlm", "t2i", "joint", "tts")


def config_from_dict(raw: dict, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for key in ("name", "pipeline", "data"):
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")
    name = raw.pop("name")
    seed = int(raw.get("seed", 0))
    # sections without an explicit seed follow the experiment seed
    for key in _SEEDED:
        section = raw.get(key)
        if section is None:
            raw[key] = {"seed": seed}
        elif isinstance(section, dict) and "seed" not in section:
            section["seed"] = seed
    data_raw = raw.pop("data")
    if not isinstance(data_raw, dict):
        raise ConfigError(f"{name}: data must be a mapping")
    data = {}
    for comp, spec in data_raw.items():
        if isinstance(spec, str):
            spec = {"manifest": spec}
        spec = dict(spec)
        spec.setdefault("seed", seed)
        data[comp] = _build(DataAssignment, spec, f"{name}.data.{comp}")
    kwargs: dict[str, Any] = {"name": name, "data": data, "base_dir": str(base_dir)}
    for key, cls in _SECTIONS.items():
        if key in raw:
            section = raw.pop(key)
            if key == "am_adapt" and "epochs" not in section:
                section = {"epochs": 3, **section}
            kwargs[key] = _build(cls, section, f"{name}.{key}")
    if "perturb" in raw:
        p = raw.pop("perturb")
        kwargs["perturb"] = None if p in (None, False) else _build(PerturbConfig, p, f"{name}.perturb")
    for key in ("pipeline", "seed", "label", "reference", "units", "embed_dim"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ConfigError(f"{name}: unknown keys {sorted(raw)}")
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_configs(path: str | os.PathLike) -> list[ExperimentConfig]:
    """Read one experiment or a matrix (``defaults`` + ``experiments``)."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base_dir = path.parent.resolve()
    if "experiments" in raw:
        defaults = raw.get("defaults") or {}
        return [config_from_dict(deep_merge(defaults, e), base_dir) for e in raw["experiments"]]
    return [config_from_dict(raw, base_dir)]
