"""End-to-end speech-to-intent model on top of a CTC acoustic encoder.

The utterance embedding is the mean of the encoder's final-layer states
over true (unpadded) frames, passed through a dimension-matching linear
layer, then classified. During multi-task fine-tuning the CTC head keeps
training; at inference it is unused and may be deleted.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .am_ctc.ctc import ctc_loss_batch, is_feasible
from .am_ctc.encoder import AcousticEncoder
from .am_ctc.units import Lexicon, targets_for
from .checkpoint import save_checkpoint
from .corpus import DatasetManifest, IntentVocabulary
from .frontend import FeatureSequence, FeatureStore
from .training import TrainConfig, batch_order, clip_and_step, make_optimizer, pad_features, seed_everything

logger = logging.getLogger(__name__)


class IntentClassifier(nn.Module):
    """Affine map from an embedding to intent logits."""

    def __init__(self, embed_dim: int, intent_vocab: IntentVocabulary):
        super().__init__()
        self.intent_vocab = intent_vocab
        self.linear = nn.Linear(embed_dim, len(intent_vocab))

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.linear(embedding)

    def distribution(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.forward(embedding).softmax(dim=-1)


def pool_embedding(hidden: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Time-mean of ``(B, T, H)`` or ``(T, H)`` states over true frames."""
    if hidden.dim() == 2:
        if hidden.shape[0] < 1:
            raise ValueError("cannot pool an empty sequence")
        return hidden.mean(dim=0)
    if hidden.shape[1] < 1:
        raise ValueError("cannot pool an empty sequence")
    if lengths is None:
        return hidden.mean(dim=1)
    if int(lengths.min()) < 1:
        raise ValueError("cannot pool an empty sequence")
    mask = (torch.arange(hidden.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)).to(hidden.dtype)
    return (hidden * mask.unsqueeze(-1)).sum(dim=1) / lengths.to(hidden.dtype).unsqueeze(1)


def identity_like_(linear: nn.Linear) -> nn.Linear:
    """Identity for square maps, (semi-)orthogonal otherwise; zero bias."""
    with torch.no_grad():
        if linear.in_features == linear.out_features:
            linear.weight.copy_(torch.eye(linear.in_features))
        else:
            nn.init.orthogonal_(linear.weight)
        linear.bias.zero_()
    return linear


class S2IModel(nn.Module):
    def __init__(self, encoder: AcousticEncoder, intent_vocab: IntentVocabulary, embed_dim: int | None = None):
        super().__init__()
        self.encoder = encoder
        self.embed_dim = embed_dim or encoder.output_dim
        self.projection = identity_like_(nn.Linear(encoder.output_dim, self.embed_dim))
        self.classifier = IntentClassifier(self.embed_dim, intent_vocab)

    @property
    def intent_vocab(self) -> IntentVocabulary:
        return self.classifier.intent_vocab

    def embed(self, feats: torch.Tensor, lengths: torch.Tensor, with_ctc: bool = False):
        """Return ``(acoustic_embedding, ctc_log_probs, out_lengths)``."""
        hidden, out_lengths, log_probs = self.encoder(feats, lengths, with_ctc=with_ctc)
        return self.projection(pool_embedding(hidden, out_lengths)), log_probs, out_lengths

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor, with_ctc: bool = False):
        ae, log_probs, out_lengths = self.embed(feats, lengths, with_ctc)
        return self.classifier(ae), log_probs, out_lengths

    def deployable(self) -> "S2IModel":
        """Copy without the CTC head; inference only needs the intent branch."""
        model = copy.deepcopy(self)
        model.encoder.drop_ctc_head()
        model.eval()
        return model

    def describe(self) -> dict:
        return {
            **self.encoder.describe(),
            "embed_dim": self.embed_dim,
            "intents": list(self.intent_vocab.labels),
            "has_ctc_head": self.encoder.ctc_head is not None,
        }

    @classmethod
    def from_description(cls, desc: dict) -> "S2IModel":
        encoder = AcousticEncoder.from_description(desc)
        if not desc.get("has_ctc_head", True):
            encoder.drop_ctc_head()
        return cls(encoder, IntentVocabulary(desc["intents"]), desc["embed_dim"])


@dataclass
class MultiTaskConfig(TrainConfig):
    ctc_weight: float = 1.0
    intent_weight: float = 1.0

    def __post_init__(self):
        if self.ctc_weight < 0 or self.intent_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ctc_weight == 0 and self.intent_weight == 0:
            raise ValueError("at least one of ctc_weight, intent_weight must be positive")


@dataclass
class S2IItem:
    features: FeatureSequence
    target: list[int]
    label: int
    ctc_ok: bool


def prepare_items(data: DatasetManifest, model: S2IModel, store: FeatureStore, lexicon: Lexicon | None = None,
                  need_labels: bool = True) -> list[S2IItem]:
    data.require_audio()
    if need_labels:
        data.require_single_intent()
    items = []
    k = model.encoder.config.subsample
    for r in data:
        feats = store.get(r)
        target = targets_for(r.transcript, model.encoder.units, lexicon)
        label = model.intent_vocab.index(r.intent) if need_labels else -1
        items.append(S2IItem(feats, target, label, is_feasible(-(-feats.num_frames // k), target)))
    return items


def multitask_loss(model: S2IModel, batch: Sequence[S2IItem], ctc_weight: float, intent_weight: float):
    """Return ``(total, ctc_term, intent_term)`` for one batch.

    The CTC term averages length-normalized NLL over utterances whose target
    fits; the intent term is mean cross-entropy.
    """
    x, lengths = pad_features([it.features for it in batch])
    logits, log_probs, out_lengths = model(x, lengths, with_ctc=ctc_weight > 0)
    zero = logits.new_zeros(())
    ctc_term = zero
    if ctc_weight > 0:
        ok = [i for i, it in enumerate(batch) if it.ctc_ok]
        if ok:
            nll = ctc_loss_batch(
                log_probs[ok], out_lengths[ok], [batch[i].target for i in ok], model.encoder.units.blank_index
            )
            ctc_term = (nll / torch.tensor([max(1, len(batch[i].target)) for i in ok], dtype=nll.dtype)).mean()
    intent_term = zero
    if intent_weight > 0:
        labels = torch.tensor([it.label for it in batch], dtype=torch.long)
        intent_term = F.cross_entropy(logits, labels)
    return ctc_weight * ctc_term + intent_weight * intent_term, ctc_term, intent_term


def build_s2i(encoder: AcousticEncoder, intent_vocab: IntentVocabulary, embed_dim: int | None = None,
              seed: int = 0) -> S2IModel:
    torch.manual_seed(seed)
    return S2IModel(copy.deepcopy(encoder), intent_vocab, embed_dim)


def train_s2i(
    encoder: AcousticEncoder | S2IModel,
    data: DatasetManifest,
    config: MultiTaskConfig = MultiTaskConfig(),
    heldout: DatasetManifest | None = None,
    embed_dim: int | None = None,
    intent_vocab: IntentVocabulary | None = None,
    store: FeatureStore | None = None,
    lexicon: Lexicon | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
) -> S2IModel:
    """Multi-task CTC + intent fine-tuning sharing one encoder.

    ``encoder`` may be a bare acoustic encoder (a fresh head is attached) or
    an existing S2I model to continue from. Held-out intent accuracy per
    epoch lands in ``model.history``.
    """
    data.require_single_intent()
    seed_everything(config.seed, config.deterministic)
    if isinstance(encoder, S2IModel):
        model = copy.deepcopy(encoder)
    else:
        model = build_s2i(encoder, intent_vocab or data.intent_vocab, embed_dim, config.seed)
    store = store or FeatureStore()
    items = prepare_items(data, model, store, lexicon)
    heldout_items = prepare_items(heldout, model, store, lexicon) if heldout is not None else None

    history = []
    params = list(model.parameters())
    optimizer = make_optimizer(params, config) if config.epochs > 0 else None
    for epoch in range(config.epochs):
        model.train()
        sums = np.zeros(3)
        for idx in batch_order(len(items), config.batch_size, config.seed, epoch):
            batch = [items[i] for i in idx]
            total, ctc_term, intent_term = multitask_loss(model, batch, config.ctc_weight, config.intent_weight)
            optimizer.zero_grad()
            total.backward()
            clip_and_step(optimizer, params, config.clip_norm)
            sums += np.array([total.item(), ctc_term.item(), intent_term.item()]) * len(batch)
        row = dict(zip(("loss", "ctc", "intent"), (sums / max(1, len(items))).tolist()), epoch=epoch + 1)
        if heldout_items:
            row["heldout_intent_accuracy"] = accuracy_on_items(model, heldout_items)
        history.append(row)
        logger.info("s2i epoch %d: %s", epoch + 1, row)
        if checkpoint_dir is not None:
            save_checkpoint(os.path.join(checkpoint_dir, f"s2i-epoch{epoch + 1:03d}.pt"), "s2i", model,
                            {"train": asdict(config), "history": history})
    model.eval()
    model.history = history
    return model


def predict_items(model: S2IModel, items: Sequence[S2IItem], batch_size: int = 64) -> np.ndarray:
    """Intent distributions, shape ``(N, |intents|)``."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start: start + batch_size]
            x, lengths = pad_features([it.features for it in chunk])
            logits, _, _ = model(x, lengths, with_ctc=False)
            out.append(logits.double().softmax(dim=-1).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, len(model.intent_vocab)))


def accuracy_on_items(model: S2IModel, items: Sequence[S2IItem]) -> float:
    probs = predict_items(model, items)
    return float(np.mean(np.argmax(probs, axis=1) == np.array([it.label for it in items])))


def classify_intent(model: S2IModel, features: FeatureSequence) -> tuple[str, np.ndarray]:
    """Most probable intent (ties go to the lowest index) and the full distribution."""
    item = S2IItem(features, [], -1, False)
    dist = predict_items(model, [item])[0]
    return model.intent_vocab.label(int(np.argmax(dist))), dist


def predict_manifest(model: S2IModel, data: DatasetManifest, store: FeatureStore | None = None) -> list[tuple[str, str, float]]:
    """``(utterance_id, intent, probability)`` for every record."""
    store = store or FeatureStore()
    data.require_audio()
    items = [S2IItem(store.get(r), [], -1, False) for r in data]
    probs = predict_items(model, items)
    rows = []
    for r, p in zip(data, probs):
        k = int(np.argmax(p))
        rows.append((r.id, model.intent_vocab.label(k), float(p[k])))
    return rows


def write_predictions(path: str | os.PathLike, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, intent, prob in rows:
            f.write(f"{utt_id}\t{intent}\t{prob:.6f}\n")


def read_predictions(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2:
                out[parts[0]] = parts[1]
    return out

