"""Masked-LM fine-tuning, intent fine-tuning and text embeddings."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..corpus import DatasetManifest, IntentVocabulary, VocabularyError
from ..training import TrainConfig, batch_order, clip_and_step, make_optimizer, seed_everything
from .bpe import BPETokenizer
from .model import T2IModel, TextEncoder, TextEncoderConfig

logger = logging.getLogger(__name__)

IGNORE = -100


@dataclass
class MLMConfig(TrainConfig):
    epochs: int = 10
    lr: float = 3e-5
    batch_size: int = 32
    mask_prob: float = 0.15


@dataclass
class IntentFinetuneConfig(TrainConfig):
    epochs: int = 3
    lr: float = 2e-5
    batch_size: int = 32


def build_text_encoder(texts: Sequence[str], config: TextEncoderConfig = TextEncoderConfig(), seed: int = 0) -> TextEncoder:
    """Train the subword vocabulary on ``texts`` and initialize a fresh encoder."""
    tokenizer = BPETokenizer.train(texts, config.vocab_size)
    torch.manual_seed(seed)
    return TextEncoder(tokenizer, config)


def mask_tokens(ids: torch.Tensor, pad_mask: torch.Tensor, tokenizer: BPETokenizer, mask_prob: float,
                rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """BERT-style corruption.

    Per sequence, ``round(mask_prob * n)`` (at least one when ``mask_prob > 0``)
    of the ``n`` non-special positions are chosen; 80% become ``[MASK]``, 10%
    a random token, 10% stay. Labels are ``IGNORE`` except at chosen positions.
    """
    inputs = ids.clone()
    labels = torch.full_like(ids, IGNORE)
    if mask_prob <= 0:
        return inputs, labels
    special = {tokenizer.pad_id, tokenizer.cls_id, tokenizer.sep_id}
    n_special = max(special) + 1
    for b in range(ids.shape[0]):
        candidates = [i for i in range(ids.shape[1]) if not pad_mask[b, i] and int(ids[b, i]) not in special]
        if not candidates:
            continue
        k = max(1, int(round(mask_prob * len(candidates))))
        chosen = rng.choice(candidates, size=min(k, len(candidates)), replace=False)
        for i in chosen:
            labels[b, i] = ids[b, i]
            u = rng.random()
            if u < 0.8:
                inputs[b, i] = tokenizer.mask_id
            elif u < 0.9:
                inputs[b, i] = int(rng.integers(n_special, len(tokenizer)))
    return inputs, labels


def mlm_loss(encoder: TextEncoder, inputs: torch.Tensor, labels: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor | None:
    """Cross-entropy over masked positions only; ``None`` when nothing is masked."""
    selected = labels != IGNORE
    if not bool(selected.any()):
        return None
    hidden = encoder(inputs, pad_mask)
    logits = encoder.mlm_head(hidden[selected])
    return F.cross_entropy(logits, labels[selected])


def _mlm_eval(encoder: TextEncoder, seqs: list[list[int]], config: MLMConfig) -> float:
    encoder.eval()
    rng = np.random.default_rng([config.seed, 10**6])
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(seqs), config.batch_size):
            ids, pad = encoder.pad_ids(seqs[start: start + config.batch_size])
            inputs, labels = mask_tokens(ids, pad, encoder.tokenizer, config.mask_prob, rng)
            loss = mlm_loss(encoder, inputs, labels, pad)
            if loss is not None:
                count = int((labels != IGNORE).sum())
                total += loss.item() * count
                n += count
    return total / n if n else 0.0


def mlm_finetune(encoder: TextEncoder, text: DatasetManifest, config: MLMConfig = MLMConfig(),
                 heldout: DatasetManifest | None = None) -> TextEncoder:
    """Masked-LM training of a copy of ``encoder`` on the transcripts in ``text``.

    Batches without any masked position are skipped (zero loss, no update).
    Per-epoch losses land in ``encoder.history``.
    """
    seed_everything(config.seed, config.deterministic)
    encoder = copy.deepcopy(encoder)
    seqs = [encoder.token_ids(r.transcript) for r in text]
    held = [encoder.token_ids(r.transcript) for r in heldout] if heldout is not None else None
    history = []
    if config.epochs > 0 and seqs:
        optimizer = make_optimizer(encoder.parameters(), config)
        for epoch in range(config.epochs):
            encoder.train()
            rng = np.random.default_rng([config.seed, epoch])
            total, n = 0.0, 0
            for idx in batch_order(len(seqs), config.batch_size, config.seed, epoch):
                ids, pad = encoder.pad_ids([seqs[i] for i in idx])
                inputs, labels = mask_tokens(ids, pad, encoder.tokenizer, config.mask_prob, rng)
                loss = mlm_loss(encoder, inputs, labels, pad)
                if loss is None:
                    continue
                optimizer.zero_grad()
                loss.backward()
                clip_and_step(optimizer, encoder.parameters(), config.clip_norm)
                total += loss.item()
                n += 1
            row = {"epoch": epoch + 1, "train_loss": total / n if n else 0.0}
            if held:
                row["heldout_loss"] = _mlm_eval(encoder, held, config)
            history.append(row)
            logger.info("mlm epoch %d: %s", epoch + 1, row)
    encoder.eval()
    encoder.history = history
    return encoder


def intent_finetune(
    encoder: TextEncoder | T2IModel,
    text: DatasetManifest,
    config: IntentFinetuneConfig = IntentFinetuneConfig(),
    intent_vocab: IntentVocabulary | None = None,
) -> T2IModel:
    """Cross-entropy training of a classifier over the ``[CLS]`` output."""
    text.require_single_intent()
    seed_everything(config.seed, config.deterministic)
    if isinstance(encoder, T2IModel):
        model = copy.deepcopy(encoder)
    else:
        model = T2IModel(copy.deepcopy(encoder), intent_vocab or text.intent_vocab)
    vocab = model.intent_vocab
    for r in text:
        if r.intent not in vocab:
            raise VocabularyError(f"record {r.id!r} has intent {r.intent!r} outside the classifier vocabulary")
    seqs = [model.encoder.token_ids(r.transcript) for r in text]
    labels = torch.tensor([vocab.index(r.intent) for r in text], dtype=torch.long)
    history = []
    if config.epochs > 0 and seqs:
        optimizer = make_optimizer(model.parameters(), config)
        for epoch in range(config.epochs):
            model.train()
            total = 0.0
            for idx in batch_order(len(seqs), config.batch_size, config.seed, epoch):
                ids, pad = model.encoder.pad_ids([seqs[i] for i in idx])
                logits = model.classifier(model.encoder.cls_embedding(ids, pad))
                loss = F.cross_entropy(logits, labels[idx])
                optimizer.zero_grad()
                loss.backward()
                clip_and_step(optimizer, model.parameters(), config.clip_norm)
                total += loss.item() * len(idx)
            history.append({"epoch": epoch + 1, "train_loss": total / len(seqs)})
            logger.info("intent epoch %d: %s", epoch + 1, history[-1])
    model.eval()
    model.history = history
    return model


def predict_texts(model: T2IModel, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
    """Intent distributions ``(N, |intents|)``."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            out.append(model(list(texts[start: start + batch_size])).double().softmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros((0, len(model.intent_vocab)))


def classify_texts(model: T2IModel, texts: Sequence[str]) -> list[str]:
    probs = predict_texts(model, texts)
    return [model.intent_vocab.label(int(k)) for k in np.argmax(probs, axis=1)]


def text_accuracy(model: T2IModel, data: DatasetManifest) -> float:
    preds = classify_texts(model, [r.transcript for r in data])
    return float(np.mean([p == r.intent for p, r in zip(preds, data)]))


def embed_text(model: T2IModel | TextEncoder, transcript: str) -> np.ndarray:
    """``[CLS]`` output for one transcript."""
    if not transcript.strip():
        raise ValueError("cannot embed an empty transcript")
    encoder = model.encoder if isinstance(model, T2IModel) else model
    encoder.eval()
    with torch.no_grad():
        ids, pad = encoder.batch_ids([transcript])
        return encoder.cls_embedding(ids, pad)[0].numpy()


def cascade_classify(words: Sequence[str], t2i: T2IModel) -> str:
    """Intent of an ASR hypothesis; an empty hypothesis is classified as ``[UNK]``."""
    return classify_texts(t2i, [" ".join(words)])[0]
