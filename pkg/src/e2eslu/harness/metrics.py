"""WER, intent accuracy and gap-recovery metrics."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

from ..corpus import DatasetManifest, IntentVocabulary

logger = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Levenshtein distance over tokens (unit-cost sub/ins/del)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]], ref_ids: Sequence[str] | None = None,
        hyp_ids: Sequence[str] | None = None) -> float:
    """Corpus word error rate: summed edit distance over summed reference length.

    Inputs may be word lists or whitespace-separated strings. When ids are
    given they must match pairwise.
    """
    if len(refs) != len(hyps):
        raise AlignmentError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if ref_ids is not None or hyp_ids is not None:
        if ref_ids is None or hyp_ids is None or list(ref_ids) != list(hyp_ids):
            raise AlignmentError("reference and hypothesis ids do not match")
    errors = words = 0
    for ref, hyp in zip(refs, hyps):
        ref = ref.split() if isinstance(ref, str) else list(ref)
        hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
        errors += edit_distance(ref, hyp)
        words += len(ref)
    if words == 0:
        return 0.0 if errors == 0 else float("inf")
    return errors / words


def intent_accuracy(refs: DatasetManifest, preds: Mapping[str, str], train_vocab: IntentVocabulary | None = None) -> float:
    """Fraction of records whose single, known intent is predicted.

    Records with several intents, or with an intent outside the training
    vocabulary, always count as errors. Missing predictions count as errors.
    """
    vocab = train_vocab if train_vocab is not None else refs.intent_vocab
    if len(refs) == 0:
        return 0.0
    correct = missing = 0
    for r in refs:
        pred = preds.get(r.id)
        if pred is None:
            missing += 1
            continue
        if len(r.intents) == 1 and r.intents[0] in vocab and pred == r.intents[0]:
            correct += 1
    if missing:
        logger.warning("%d records have no prediction; counted as errors", missing)
    return correct / len(refs)


def recovery(acc_method: float, acc_low: float, acc_full: float) -> float | None:
    """Share of the low-to-full resource accuracy gap closed; ``None`` if there is no gap."""
    gap = acc_full - acc_low
    if abs(gap) < 1e-12:
        return None
    return (acc_method - acc_low) / gap
