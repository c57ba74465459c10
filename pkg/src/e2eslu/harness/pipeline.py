"""Run one experiment row: stages in dependency order, cached by content hash.

Every stage writes into ``<cache>/<stage>/<key>/`` where ``key`` digests the
stage's config subtree, the content of its input manifests and the keys of
its upstream stages. A stage directory is built under a temporary name and
renamed into place, so concurrent rows never observe partial artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..am_ctc import adapt_am, pretrain_am, train_ngram_lm
from ..am_ctc.decode import decode, write_hypotheses
from ..am_ctc.train import AMTrainConfig, greedy_wer
from ..am_ctc.units import UnitVocabulary
from ..checkpoint import load_checkpoint, save_checkpoint
from ..corpus import DatasetManifest, IntentVocabulary, load_manifest, save_manifest, subset
from ..frontend import FeatureStore, PerturbationPolicy, perturb
from ..joint import joint_train
from ..s2i import predict_manifest, train_s2i, write_predictions
from ..t2i.train import build_text_encoder, classify_texts, intent_finetune, mlm_finetune
from ..ttsaug import ExternalCommandBackend, PreSynthesizedDirBackend, StubBackend, merge_for_training, synthesize
from .config import ExperimentConfig, Pipeline
from .metrics import intent_accuracy, wer

logger = logging.getLogger(__name__)

CACHE_ENV = "E2ESLU_CACHE_DIR"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "e2eslu")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentRow:
    name: str
    label: str
    pipeline: str
    seed: int
    config_hash: str
    status: str = "ok"
    intent_accuracy: float | None = None
    wer: float | None = None
    counts: dict = field(default_factory=dict)
    reference: str | None = None
    data: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None
    cached: bool = False
    artifacts: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def metrics(self) -> dict:
        """The fields that must be identical when a row is reproduced."""
        return {"intent_accuracy": self.intent_accuracy, "wer": self.wer, "counts": self.counts}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRow":
        return cls(**d)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:20]


def environment_info() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


class ExperimentRunner:
    """Stage graph for one :class:`ExperimentConfig`."""

    def __init__(self, config: ExperimentConfig, cache_dir: str | os.PathLike | None = None):
        self.config = config
        self.cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.store = FeatureStore(config.features, self.cache / "features")
        self.units = UnitVocabulary.graphemes() if config.units == "grapheme" else UnitVocabulary.phones()
        self._manifests: dict[str, DatasetManifest] = {}
        self.artifacts: dict[str, str] = {}
        self.counts: dict[str, int | float] = {}

    # -- data

    def manifest(self, component: str) -> DatasetManifest:
        if component not in self._manifests:
            a = self.config.data[component]
            m = load_manifest(self.config.manifest_path(component))
            if a.fraction < 1.0:
                m = subset(m, a.fraction, a.seed if a.seed is not None else self.config.seed)
            self._manifests[component] = m
        return self._manifests[component]

    def data_key(self, component: str) -> str:
        return self.manifest(component).content_hash()

    def intent_vocab(self) -> IntentVocabulary:
        """Union over every intent-bearing training component, so rows share stages."""
        vocab = IntentVocabulary(())
        for comp in ("s2i", "t2i", "joint", "tts_source"):
            if comp in self.config.data:
                vocab = vocab.union(self.manifest(comp).intent_vocab)
        return vocab

    # -- caching

    def _cached(self, stage: str, payload: dict, build: Callable[[Path], None]) -> tuple[Path, str]:
        key = _digest({"stage": stage, **payload})
        final = self.cache / stage / key
        self.artifacts[stage] = str(final)
        if (final / "DONE").exists():
            logger.info("%s: cache hit %s", stage, key)
            return final, key
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{key}-", dir=final.parent))
        try:
            t0 = time.time()
            build(tmp)
            (tmp / "DONE").write_text(json.dumps({"seconds": time.time() - t0}))
            try:
                os.replace(tmp, final)
            except OSError:
                # another runner finished the same stage first
                if not (final / "DONE").exists():
                    raise
        except BaseException as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            if isinstance(exc, StageError):
                raise
            raise StageError(stage, exc) from exc
        shutil.rmtree(tmp, ignore_errors=True)
        return final, key

    def _perturbed(self, component: str, manifest: DatasetManifest, enabled: bool) -> tuple[DatasetManifest, str]:
        p = self.config.perturb
        if not enabled or p is None:
            return manifest, manifest.content_hash()
        policy = PerturbationPolicy(p.speed_factors, p.tempo_factors)

        def build(d: Path):
            save_manifest(perturb(manifest, policy, d / "wav"), d / "manifest.jsonl")

        path, key = self._cached("perturb", {"data": manifest.content_hash(), "policy": asdict(policy)}, build)
        return load_manifest(path / "manifest.jsonl"), key

    # -- stages

    def am_pretrain(self) -> tuple[Path, str]:
        c = self.config
        payload = {"data": self.data_key("am_pretrain"), "encoder": asdict(c.encoder), "train": asdict(c.am_pretrain),
                   "units": c.units, "features": asdict(c.features)}

        def build(d: Path):
            cfg = AMTrainConfig(**asdict(c.am_pretrain), encoder=c.encoder)
            heldout = self.manifest("dev") if "dev" in c.data else None
            enc = pretrain_am(self.manifest("am_pretrain"), self.units, cfg, heldout, store=self.store)
            save_checkpoint(d / "encoder.pt", "acoustic_encoder", enc,
                            {"train": cfg.to_dict(), "history": enc.history, "skipped": enc.skipped})

        return self._cached("am_pretrain", payload, build)

    def am_adapt(self) -> tuple[Path, str]:
        c = self.config
        base_dir, base_key = self.am_pretrain()
        data, data_key = self._perturbed("am_adapt", self.manifest("am_adapt"), True)

        def build(d: Path):
            base, _ = load_checkpoint(base_dir / "encoder.pt", "acoustic_encoder")
            enc = adapt_am(base, data, c.am_adapt, store=self.store)
            save_checkpoint(d / "encoder.pt", "acoustic_encoder", enc,
                            {"train": c.am_adapt.to_dict(), "history": enc.history})

        return self._cached("am_adapt", {"base": base_key, "data": data_key, "train": asdict(c.am_adapt)}, build)

    def _train_s2i(self, stage: str, data: DatasetManifest, data_key: str) -> tuple[Path, str]:
        c = self.config
        enc_dir, enc_key = self.am_adapt()
        vocab = self.intent_vocab()
        payload = {"encoder": enc_key, "data": data_key, "train": asdict(c.s2i), "embed_dim": c.embed_dim,
                   "vocab": list(vocab.labels)}

        def build(d: Path):
            enc, _ = load_checkpoint(enc_dir / "encoder.pt", "acoustic_encoder")
            heldout = self.manifest("heldout") if "heldout" in c.data else None
            model = train_s2i(enc, data, c.s2i, heldout, c.embed_dim, vocab, self.store)
            save_checkpoint(d / "s2i.pt", "s2i", model, {"train": asdict(c.s2i), "history": model.history})
            (d / "train_count").write_text(str(len(data)))

        return self._cached(stage, payload, build)

    def s2i_real(self) -> tuple[Path, str, DatasetManifest]:
        data, key = self._perturbed("s2i", self.manifest("s2i"), True)
        self.counts["s2i_train"] = len(data)
        return (*self._train_s2i("s2i", data, key), data)

    def synth(self) -> tuple[DatasetManifest, str]:
        c = self.config
        source = self.manifest("tts_source")
        t = c.tts
        payload = {"data": source.content_hash(), "tts": asdict(t)}

        def build(d: Path):
            if t.backend == "stub":
                backend = StubBackend(list(t.speakers))
            elif t.backend == "external_command":
                backend = ExternalCommandBackend(list(t.command), list(t.speakers))
            elif t.backend == "pre_synthesized_dir":
                backend = PreSynthesizedDirBackend(t.directory)
            else:
                raise ValueError(f"unknown TTS backend {t.backend!r}")
            seed = t.seed if t.seed is not None else c.seed
            syn = synthesize(source, backend, seed, d / "wav")
            save_manifest(syn, d / "manifest.jsonl")

        path, key = self._cached("synth", payload, build)
        return load_manifest(path / "manifest.jsonl"), key

    def s2i_tts(self) -> tuple[Path, str, DatasetManifest]:
        c = self.config
        with_tts = c.perturb is not None and c.perturb.with_tts
        real, real_key = self._perturbed("s2i", self.manifest("s2i"), with_tts)
        syn, syn_key = self.synth()
        syn, syn_key = self._perturbed("tts_source", syn, with_tts) if with_tts else (syn, syn_key)
        merged = merge_for_training(real, syn)
        self.counts["s2i_train"] = len(real)
        self.counts["synthetic"] = len(syn)
        path, key = self._train_s2i("s2i_tts", merged, _digest([real_key, syn_key]))
        self._tts_diagnostic(syn)
        return path, key, merged

    def _tts_diagnostic(self, syn: DatasetManifest, n: int = 50) -> None:
        """Greedy WER of the adapted AM on a slice of synthetic speech (logged, not gated)."""
        if self.units.kind.value != "grapheme" or len(syn) == 0:
            return
        enc_dir, _ = self.am_adapt()
        enc, _ = load_checkpoint(enc_dir / "encoder.pt", "acoustic_encoder")
        value = greedy_wer(enc, syn.with_records(syn.records[:n]), self.store)
        self.counts["tts_greedy_wer"] = round(value, 6)
        logger.info("greedy WER on synthetic speech: %.3f", value)

    def t2i(self) -> tuple[Path, str]:
        c = self.config
        text = self.manifest("t2i")
        vocab = self.intent_vocab()
        mlm_payload = {"data": text.content_hash(), "encoder": asdict(c.text_encoder), "mlm": asdict(c.mlm)}

        def build_mlm(d: Path):
            torch.manual_seed(c.mlm.seed)
            enc = build_text_encoder([r.transcript for r in text], c.text_encoder, c.mlm.seed)
            enc = mlm_finetune(enc, text, c.mlm)
            save_checkpoint(d / "text_encoder.pt", "text_encoder", enc, {"history": enc.history})

        mlm_dir, mlm_key = self._cached("mlm", mlm_payload, build_mlm)

        def build(d: Path):
            enc, _ = load_checkpoint(mlm_dir / "text_encoder.pt", "text_encoder")
            model = intent_finetune(enc, text, c.t2i, vocab)
            save_checkpoint(d / "t2i.pt", "t2i", model, {"history": model.history})

        self.counts["t2i_train"] = len(text)
        return self._cached("t2i", {"mlm": mlm_key, "train": asdict(c.t2i), "vocab": list(vocab.labels)}, build)

    def joint(self, s2i_dir: Path, s2i_key: str, data: DatasetManifest) -> tuple[Path, str]:
        c = self.config
        t2i_dir, t2i_key = self.t2i()
        if "joint" in c.data:
            data = self.manifest("joint")
        payload = {"s2i": s2i_key, "t2i": t2i_key, "data": data.content_hash(), "joint": asdict(c.joint)}

        def build(d: Path):
            s2i, _ = load_checkpoint(s2i_dir / "s2i.pt", "s2i")
            t2i, _ = load_checkpoint(t2i_dir / "t2i.pt", "t2i")
            heldout = self.manifest("heldout") if "heldout" in c.data else None
            result = joint_train(data, s2i, t2i, c.joint, heldout, self.store, log_path=d / "loss_log.jsonl")
            save_checkpoint(d / "s2i.pt", "s2i", result.model, {"joint": asdict(c.joint), "history": result.history})
            save_checkpoint(d / "text_branch.pt", "t2i", result.text_branch, {"joint": asdict(c.joint)})

        return self._cached("joint", payload, build)

    # -- evaluation

    def evaluate_s2i(self, model_dir: Path) -> tuple[float, None]:
        test = self.manifest("test")
        model, _ = load_checkpoint(model_dir / "s2i.pt", "s2i")
        rows = predict_manifest(model, test, self.store)
        out = self.cache / "predictions" / self.config.config_hash()[:20]
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out / "predictions.tsv", rows)
        self.artifacts["predictions"] = str(out / "predictions.tsv")
        return intent_accuracy(test, {i: p for i, p, _ in rows}, model.intent_vocab), None

    def evaluate_cascade(self) -> tuple[float, float]:
        c = self.config
        test = self.manifest("test")
        enc_dir, _ = self.am_adapt()
        enc, _ = load_checkpoint(enc_dir / "encoder.pt", "acoustic_encoder")
        lm = train_ngram_lm(self.manifest("lm"), c.cascade.lm_order, c.cascade.lm_k)
        hyps = [decode(enc, self.store.get(r), c.cascade.mode, lm, c.cascade.beam, c.cascade.lm_weight) for r in test]
        t2i_dir, _ = self.t2i()
        t2i, _ = load_checkpoint(t2i_dir / "t2i.pt", "t2i")
        preds = classify_texts(t2i, [" ".join(h) for h in hyps])
        out = self.cache / "predictions" / c.config_hash()[:20]
        out.mkdir(parents=True, exist_ok=True)
        write_hypotheses(out / "hypotheses.tsv", zip(test.ids, hyps))
        write_predictions(out / "predictions.tsv", [(r.id, p, 1.0) for r, p in zip(test, preds)])
        self.artifacts["hypotheses"] = str(out / "hypotheses.tsv")
        self.artifacts["predictions"] = str(out / "predictions.tsv")
        error_rate = wer([r.words for r in test], hyps, test.ids, test.ids)
        return intent_accuracy(test, dict(zip(test.ids, preds)), t2i.intent_vocab), error_rate

    def run(self) -> tuple[float, float | None]:
        p = self.config.pipeline
        if p is Pipeline.CASCADE:
            self.counts["t2i_train"] = len(self.manifest("t2i"))
            return self._stage("eval", self.evaluate_cascade)
        if p.uses_tts:
            model_dir, key, data = self.s2i_tts()
        else:
            model_dir, key, data = self.s2i_real()
        if p.uses_joint:
            model_dir, key = self.joint(model_dir, key, data)
        return self._stage("eval", lambda: self.evaluate_s2i(model_dir))

    def _stage(self, name: str, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc


def describe_data(config: ExperimentConfig) -> dict[str, str]:
    """Short per-component labels such as ``train@10%`` for report columns."""
    out = {}
    for comp, a in sorted(config.data.items()):
        stem = Path(a.manifest).stem
        out[comp] = stem if a.fraction >= 1.0 else f"{stem}@{a.fraction * 100:g}%"
    return out


def row_key(config: ExperimentConfig, runner: ExperimentRunner) -> str:
    return _digest({"config": config.config_hash(), "data": {k: runner.data_key(k) for k in sorted(config.data)}})


def run_experiment(config: ExperimentConfig, cache_dir: str | os.PathLike | None = None,
                   use_cache: bool = True) -> ExperimentRow:
    """Execute the pipeline for one row; failures are reported in the row, not raised."""
    t0 = time.time()
    row = ExperimentRow(config.name, config.label, config.pipeline.value, config.seed, config.config_hash(),
                        reference=config.reference, data=describe_data(config))
    try:
        config.check_manifests()
        runner = ExperimentRunner(config, cache_dir)
        key = row_key(config, runner)
    except Exception as exc:
        row.status, row.failed_stage, row.error = "failed", "config", str(exc)
        return row
    cached = runner.cache / "rows" / key / "row.json"
    if use_cache and cached.exists():
        old = ExperimentRow.from_dict(json.loads(cached.read_text()))
        old.cached = True
        return old
    try:
        counts_test = len(runner.manifest("test"))
        acc, error_rate = runner.run()
        row.intent_accuracy = float(acc)
        row.wer = None if error_rate is None else float(error_rate)
        row.counts = {"test": counts_test, **runner.counts}
    except StageError as exc:
        logger.error("%s: %s\n%s", config.name, exc, "".join(traceback.format_exception(exc.cause)))
        row.status, row.failed_stage, row.error = "failed", exc.stage, str(exc.cause)
    except Exception as exc:
        row.status, row.failed_stage, row.error = "failed", "data", str(exc)
    row.artifacts = dict(runner.artifacts)
    row.seconds = round(time.time() - t0, 3)
    if row.ok:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(json.dumps(row.to_dict(), sort_keys=True, indent=1))
        os.replace(tmp, cached)
    return row


def _run_one(args) -> dict:
    config, cache_dir, use_cache = args
    torch.set_num_threads(1)
    return run_experiment(config, cache_dir, use_cache).to_dict()


def run_matrix(configs: list[ExperimentConfig], cache_dir: str | os.PathLike | None = None, jobs: int = 1,
               use_cache: bool = True) -> list[ExperimentRow]:
    """Run rows sequentially, or in worker processes when ``jobs > 1``."""
    if jobs <= 1:
        return [run_experiment(c, cache_dir, use_cache) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_run_one, [(c, cache_dir, use_cache) for c in configs]))
    return [ExperimentRow.from_dict(r) for r in results]
