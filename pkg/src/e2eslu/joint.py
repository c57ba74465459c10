"""Joint training that ties acoustic embeddings to text embeddings.

Both embeddings go through one shared intent classifier, initialized from
the text model's classifier. The optimized objective is::

    mse_weight * MSE(AE, stopgrad(TE)) + CE(AE) + alpha * CE(TE) [+ ctc_weight * CTC]

so the speech branch sees ``MSE + CE(AE) + alpha * CE(TE)`` while the text
encoder only receives ``alpha * CE(TE)`` (``CE(AE)`` does not depend on it);
the shared classifier receives both classification terms.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .am_ctc.ctc import ctc_loss_batch
from .am_ctc.units import Lexicon
from .corpus import DatasetManifest
from .frontend import FeatureSequence, FeatureStore
from .s2i import S2IItem, S2IModel, classify_intent, prepare_items
from .t2i.model import T2IModel
from .training import batch_order, pad_features, seed_everything

logger = logging.getLogger(__name__)


class JointConfigError(ValueError):
    pass


@dataclass
class JointTrainConfig:
    alpha: float = 1.0
    mse_weight: float = 1.0
    retain_ctc: bool = True
    ctc_weight: float = 1.0
    epochs: int = 10
    batch_size: int = 16
    lr_speech: float = 3e-4
    lr_text: float = 3e-4
    clip_norm: float = 5.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.mse_weight < 0 or self.ctc_weight < 0:
            raise JointConfigError("loss weights must be nonnegative")


@dataclass
class JointLossBreakdown:
    mse: float
    ce_ae: float
    ce_te: float
    alpha: float
    speech_branch_total: float
    text_branch_total: float
    ctc: float = 0.0
    objective: float = 0.0
    step: int = 0

    @classmethod
    def from_terms(cls, mse: float, ce_ae: float, ce_te: float, alpha: float, ctc: float = 0.0,
                   objective: float = 0.0, step: int = 0) -> "JointLossBreakdown":
        return cls(
            mse=mse, ce_ae=ce_ae, ce_te=ce_te, alpha=alpha,
            speech_branch_total=mse + ce_ae + alpha * ce_te,
            text_branch_total=ce_ae + alpha * ce_te,
            ctc=ctc, objective=objective, step=step,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class JointItem:
    speech: S2IItem
    transcript: str


@dataclass
class JointTerms:
    """Differentiable loss terms of one batch, before weighting."""

    mse: torch.Tensor
    ce_ae: torch.Tensor
    ce_te: torch.Tensor
    ctc: torch.Tensor
    ae: torch.Tensor
    te: torch.Tensor


class JointTrainer:
    """Holds the speech branch, the text branch and the classifier they share."""

    def __init__(self, s2i: S2IModel, t2i: T2IModel, config: JointTrainConfig = JointTrainConfig()):
        if s2i.embed_dim != t2i.encoder.width:
            raise JointConfigError(
                f"acoustic embedding dim {s2i.embed_dim} != text embedding dim {t2i.encoder.width}"
            )
        if s2i.intent_vocab != t2i.intent_vocab:
            raise JointConfigError("speech and text models use different intent vocabularies")
        self.config = config
        self.speech = copy.deepcopy(s2i)
        self.text = copy.deepcopy(t2i)
        # one module object, referenced by both branches
        self.speech.classifier = self.text.classifier
        self.shared = self.text.classifier
        self.step_count = 0
        speech_params = list(self.speech.encoder.parameters()) + list(self.speech.projection.parameters())
        self.optimizer = torch.optim.Adam(
            [
                {"params": speech_params, "lr": config.lr_speech},
                {"params": list(self.shared.parameters()), "lr": config.lr_speech},
                {"params": list(self.text.encoder.parameters()), "lr": config.lr_text},
            ]
        )

    def text_branch_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.text.encoder.parameters())

    def speech_branch_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.speech.encoder.parameters()) + list(self.speech.projection.parameters())

    def terms(self, batch: Sequence[JointItem]) -> JointTerms:
        x, lengths = pad_features([it.speech.features for it in batch])
        with_ctc = self.config.retain_ctc and self.config.ctc_weight > 0
        ae, log_probs, out_lengths = self.speech.embed(x, lengths, with_ctc=with_ctc)
        te = self.text.embed([it.transcript for it in batch])
        labels = torch.tensor([it.speech.label for it in batch], dtype=torch.long)
        ce_ae = F.cross_entropy(self.shared(ae), labels)
        ce_te = F.cross_entropy(self.shared(te), labels)
        # stop-gradient: the tying term never reaches the text encoder
        mse = F.mse_loss(ae, te.detach())
        ctc = ae.new_zeros(())
        if with_ctc:
            ok = [i for i, it in enumerate(batch) if it.speech.ctc_ok]
            if ok:
                nll = ctc_loss_batch(log_probs[ok], out_lengths[ok], [batch[i].speech.target for i in ok],
                                     self.speech.encoder.units.blank_index)
                ctc = (nll / torch.tensor([max(1, len(batch[i].speech.target)) for i in ok], dtype=nll.dtype)).mean()
        return JointTerms(mse, ce_ae, ce_te, ctc, ae, te)

    def objective(self, t: JointTerms) -> torch.Tensor:
        c = self.config
        total = c.mse_weight * t.mse + t.ce_ae + c.alpha * t.ce_te
        if c.retain_ctc and c.ctc_weight > 0:
            total = total + c.ctc_weight * t.ctc
        return total

    def step(self, batch: Sequence[JointItem]) -> JointLossBreakdown:
        """One parameter update; returns the loss breakdown before the update."""
        self.speech.train()
        self.text.train()
        t = self.terms(batch)
        total = self.objective(t)
        self.optimizer.zero_grad()
        total.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"] if p.grad is not None]
        if self.config.clip_norm:
            torch.nn.utils.clip_grad_norm_(params, self.config.clip_norm)
        self.optimizer.step()
        self.step_count += 1
        return JointLossBreakdown.from_terms(
            t.mse.item(), t.ce_ae.item(), t.ce_te.item(), self.config.alpha, t.ctc.item(), total.item(),
            self.step_count,
        )

    def embedding_distance(self, items: Sequence[JointItem], batch_size: int = 64) -> float:
        """Mean squared AE-TE distance (per dimension) over ``items``."""
        self.speech.eval()
        self.text.eval()
        total, n = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(items), batch_size):
                chunk = items[start: start + batch_size]
                x, lengths = pad_features([it.speech.features for it in chunk])
                ae, _, _ = self.speech.embed(x, lengths)
                te = self.text.embed([it.transcript for it in chunk])
                total += float(((ae - te) ** 2).mean(dim=1).sum())
                n += len(chunk)
        return total / max(1, n)


def joint_step(batch: Sequence[JointItem], trainer: JointTrainer) -> JointLossBreakdown:
    return trainer.step(batch)


def prepare_joint_items(data: DatasetManifest, s2i: S2IModel, store: FeatureStore,
                        lexicon: Lexicon | None = None) -> tuple[list[JointItem], int]:
    """Pair speech items with transcripts; records without text are skipped and counted."""
    usable = [r for r in data if r.transcript.strip()]
    skipped = len(data) - len(usable)
    if skipped:
        logger.warning("joint training skips %d records without transcripts", skipped)
    items = prepare_items(data.with_records(usable), s2i, store, lexicon)
    return [JointItem(it, r.transcript) for it, r in zip(items, usable)], skipped


@dataclass
class JointResult:
    model: S2IModel
    text_branch: T2IModel
    log: list[JointLossBreakdown] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    skipped: int = 0


def joint_train(
    speech_data: DatasetManifest,
    s2i: S2IModel,
    t2i: T2IModel,
    config: JointTrainConfig = JointTrainConfig(),
    heldout: DatasetManifest | None = None,
    store: FeatureStore | None = None,
    lexicon: Lexicon | None = None,
    log_path: str | os.PathLike | None = None,
) -> JointResult:
    """Iterate joint steps over ``speech_data`` for ``config.epochs`` epochs.

    ``result.model`` is the speech branch with the shared classifier, the
    deployable artifact; ``result.text_branch`` is kept for training
    checkpoints only. One JSON loss breakdown per step goes to ``log_path``.
    """
    speech_data.require_single_intent()
    seed_everything(config.seed, config.deterministic)
    store = store or FeatureStore()
    trainer = JointTrainer(s2i, t2i, config)
    items, skipped = prepare_joint_items(speech_data, trainer.speech, store, lexicon)
    held_items = prepare_joint_items(heldout, trainer.speech, store, lexicon)[0] if heldout is not None else None

    log: list[JointLossBreakdown] = []
    history: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            epoch_log = []
            for idx in batch_order(len(items), config.batch_size, config.seed, epoch):
                b = trainer.step([items[i] for i in idx])
                epoch_log.append(b)
                if log_file is not None:
                    log_file.write(b.to_json() + "\n")
            log.extend(epoch_log)
            row = {
                "epoch": epoch + 1,
                "mse": float(np.mean([b.mse for b in epoch_log])) if epoch_log else 0.0,
                "ce_ae": float(np.mean([b.ce_ae for b in epoch_log])) if epoch_log else 0.0,
                "ce_te": float(np.mean([b.ce_te for b in epoch_log])) if epoch_log else 0.0,
            }
            if held_items:
                row["heldout_embedding_distance"] = trainer.embedding_distance(held_items)
            history.append(row)
            logger.info("joint epoch %d: %s", epoch + 1, row)
    finally:
        if log_file is not None:
            log_file.close()
    trainer.speech.eval()
    trainer.text.eval()
    return JointResult(trainer.speech, trainer.text, log, history, skipped)


def infer(model: S2IModel, features: FeatureSequence) -> tuple[str, np.ndarray]:
    """Acoustic-branch intent inference; no text is consumed."""
    return classify_intent(model, features)


def read_loss_log(path: str | os.PathLike) -> list[JointLossBreakdown]:
    with open(path, encoding="utf-8") as f:
        return [JointLossBreakdown(**json.loads(line)) for line in f if line.strip()]
