"""CTC pretraining and in-domain adaptation of the acoustic encoder."""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field

import torch

from ..checkpoint import save_checkpoint
from ..corpus import DatasetManifest, ManifestError
from ..frontend import FeatureStore
from ..training import TrainConfig, batch_order, clip_and_step, make_optimizer, pad_features, seed_everything
from ..harness.metrics import wer
from .ctc import ctc_loss_batch, is_feasible
from .decode import greedy_decode
from .encoder import AcousticEncoder, EncoderConfig
from .units import Lexicon, UnitVocabulary, targets_for

logger = logging.getLogger(__name__)


class AMConfigError(ValueError):
    pass


@dataclass
class AMTrainConfig(TrainConfig):
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


def _prepare(manifest: DatasetManifest, encoder: AcousticEncoder, store: FeatureStore, lexicon: Lexicon | None):
    """Features and unit targets, skipping utterances with no valid alignment."""
    manifest.require_audio()
    items, skipped = [], 0
    k = encoder.config.subsample
    for r in manifest:
        feats = store.get(r)
        target = targets_for(r.transcript, encoder.units, lexicon)
        if not is_feasible(-(-feats.num_frames // k), target):
            skipped += 1
            continue
        items.append((feats, target))
    if skipped:
        logger.warning("skipped %d of %d utterances with infeasible CTC targets", skipped, len(manifest))
    return items, skipped


def mean_ctc_loss(encoder: AcousticEncoder, items, batch_size: int = 32) -> float:
    """Length-normalized CTC loss averaged over utterances (eval mode)."""
    if not items:
        return float("nan")
    was_training = encoder.training
    encoder.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start: start + batch_size]
            x, lengths = pad_features([f for f, _ in chunk])
            _, out_lengths, log_probs = encoder(x, lengths)
            nll = ctc_loss_batch(log_probs, out_lengths, [t for _, t in chunk], encoder.units.blank_index)
            total += float((nll / torch.tensor([max(1, len(t)) for _, t in chunk])).sum())
    encoder.train(was_training)
    return total / len(items)


def heldout_ctc_loss(encoder: AcousticEncoder, manifest: DatasetManifest, store: FeatureStore | None = None,
                     lexicon: Lexicon | None = None) -> float:
    items, _ = _prepare(manifest, encoder, store or FeatureStore(), lexicon)
    return mean_ctc_loss(encoder, items)


def _fit(encoder: AcousticEncoder, items, config: TrainConfig, heldout_items=None) -> list[dict]:
    history = []
    if config.epochs <= 0:
        return history
    optimizer = make_optimizer(encoder.parameters(), config)
    for epoch in range(config.epochs):
        encoder.train()
        running, seen = 0.0, 0
        for idx in batch_order(len(items), config.batch_size, config.seed, epoch):
            chunk = [items[i] for i in idx]
            x, lengths = pad_features([f for f, _ in chunk])
            _, out_lengths, log_probs = encoder(x, lengths)
            nll = ctc_loss_batch(log_probs, out_lengths, [t for _, t in chunk], encoder.units.blank_index)
            loss = (nll / torch.tensor([max(1, len(t)) for _, t in chunk], dtype=nll.dtype)).mean()
            optimizer.zero_grad()
            loss.backward()
            clip_and_step(optimizer, encoder.parameters(), config.clip_norm)
            running += loss.item() * len(chunk)
            seen += len(chunk)
        row = {"epoch": epoch + 1, "train_loss": running / max(1, seen)}
        if heldout_items:
            row["heldout_loss"] = mean_ctc_loss(encoder, heldout_items)
        logger.info("am epoch %(epoch)d: %(row)s", {"epoch": epoch + 1, "row": row})
        history.append(row)
    encoder.eval()
    return history


def pretrain_am(
    train: DatasetManifest,
    units: UnitVocabulary,
    config: AMTrainConfig = AMTrainConfig(),
    heldout: DatasetManifest | None = None,
    lexicon: Lexicon | None = None,
    store: FeatureStore | None = None,
    checkpoint_path: str | os.PathLike | None = None,
) -> AcousticEncoder:
    """Train an encoder from seeded initialization with CTC loss.

    Per-epoch losses are attached as ``encoder.history``; infeasible
    utterances are skipped and counted in ``encoder.skipped``.
    """
    if len(train) == 0:
        raise ManifestError("pretraining manifest is empty")
    seed_everything(config.seed, config.deterministic)
    encoder = AcousticEncoder(config.encoder, units)
    store = store or FeatureStore()
    items, skipped = _prepare(train, encoder, store, lexicon)
    heldout_items = _prepare(heldout, encoder, store, lexicon)[0] if heldout is not None else None
    encoder.history = _fit(encoder, items, config, heldout_items)
    encoder.skipped = skipped
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, "acoustic_encoder", encoder, {"train": config.to_dict(), "history": encoder.history})
    return encoder


def adapt_am(
    base: AcousticEncoder,
    domain: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    heldout: DatasetManifest | None = None,
    units: UnitVocabulary | None = None,
    lexicon: Lexicon | None = None,
    store: FeatureStore | None = None,
) -> AcousticEncoder:
    """Continue CTC training of a copy of ``base`` on in-domain data."""
    if units is not None and units != base.units:
        raise AMConfigError("unit vocabulary differs from the base encoder's")
    if len(domain) == 0:
        raise ManifestError("adaptation manifest is empty")
    seed_everything(config.seed, config.deterministic)
    encoder = copy.deepcopy(base)
    store = store or FeatureStore()
    items, skipped = _prepare(domain, encoder, store, lexicon)
    heldout_items = _prepare(heldout, encoder, store, lexicon)[0] if heldout is not None else None
    encoder.history = _fit(encoder, items, config, heldout_items)
    encoder.skipped = skipped
    return encoder


def greedy_wer(encoder: AcousticEncoder, manifest: DatasetManifest, store: FeatureStore | None = None) -> float:
    """Word error rate of greedy grapheme decoding; a cheap training diagnostic."""
    store = store or FeatureStore()
    refs, hyps = [], []
    encoder.eval()
    with torch.no_grad():
        for r in manifest:
            refs.append(r.words)
            hyps.append(greedy_decode(encoder, store.get(r)))
    return wer(refs, hyps)

