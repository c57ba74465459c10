"""Greedy and prefix-beam CTC decoding."""

from __future__ import annotations

import os
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np
import torch

from ..frontend import FeatureSequence
from .encoder import AcousticEncoder
from .ngram import EOS, CharNgramLM
from .units import Lexicon, UnitKind, UnitVocabulary

_NEG_INF = -np.inf


class DecodeConfigError(ValueError):
    pass


def greedy_units(log_probs: np.ndarray, blank: int = 0) -> list[int]:
    """Best unit per frame, repeats collapsed, blanks dropped."""
    best = np.argmax(np.asarray(log_probs), axis=-1)
    out, prev = [], None
    for u in best.tolist():
        if u != prev and u != blank:
            out.append(u)
        prev = u
    return out


def _lae(a: float, b: float) -> float:
    if a == _NEG_INF:
        return b
    if b == _NEG_INF:
        return a
    m = max(a, b)
    return m + float(np.log1p(np.exp(-abs(a - b))))


def prefix_beam_units(
    log_probs: np.ndarray,
    units: UnitVocabulary,
    beam: int = 8,
    lm: CharNgramLM | None = None,
    lm_weight: float = 0.0,
) -> list[int]:
    """CTC prefix beam search with optional character LM shallow fusion.

    Each prefix carries log-probabilities of ending in blank and non-blank;
    extending a prefix with unit ``c`` adds ``lm_weight * log P_lm(c | prefix)``.
    """
    if beam < 1:
        raise DecodeConfigError(f"beam width must be >= 1, got {beam}")
    lp = np.asarray(log_probs, dtype=np.float64)
    blank = units.blank_index
    use_lm = lm is not None and lm_weight != 0.0
    text_of: dict[tuple[int, ...], str] = {(): ""}

    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, _NEG_INF)}
    for t in range(lp.shape[0]):
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [_NEG_INF, _NEG_INF])
        frame = lp[t]
        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            entry = nxt[prefix]
            entry[0] = _lae(entry[0], total + frame[blank])
            last = prefix[-1] if prefix else None
            for c in range(lp.shape[1]):
                if c == blank:
                    continue
                p = frame[c]
                new = prefix + (c,)
                if new not in text_of:
                    text_of[new] = text_of[prefix] + units.units[c]
                bonus = lm_weight * lm.logprob(text_of[prefix], units.units[c]) if use_lm else 0.0
                ext = nxt[new]
                if c == last:
                    ext[1] = _lae(ext[1], pb + p + bonus)
                    entry[1] = _lae(entry[1], pnb + p)
                else:
                    ext[1] = _lae(ext[1], total + p + bonus)
        ranked = sorted(nxt.items(), key=lambda kv: -_lae(kv[1][0], kv[1][1]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam]}

    def final(item):
        prefix, (pb, pnb) = item
        score = _lae(pb, pnb)
        if use_lm:
            score += lm_weight * lm.logprob(text_of[prefix], EOS)
        return score

    best = max(beams.items(), key=final)
    return list(best[0])


def units_to_words(seq: Sequence[int], units: UnitVocabulary, lexicon: Lexicon | None = None,
                   vocabulary: Iterable[str] | None = None) -> list[str]:
    if units.kind == UnitKind.GRAPHEME:
        return "".join(units.units[u] for u in seq).split()
    if lexicon is None:
        lexicon = Lexicon()
    return lexicon.words_from_phones([units.units[u] for u in seq], vocabulary)


def decode_log_probs(
    log_probs: np.ndarray,
    units: UnitVocabulary,
    mode: str = "greedy",
    lm: CharNgramLM | None = None,
    beam: int = 8,
    lm_weight: float = 0.0,
    lexicon: Lexicon | None = None,
) -> list[str]:
    if beam < 1:
        raise DecodeConfigError(f"beam width must be >= 1, got {beam}")
    if mode == "greedy":
        seq = greedy_units(log_probs, units.blank_index)
    elif mode == "prefix_beam":
        if units.kind != UnitKind.GRAPHEME:
            raise DecodeConfigError("prefix beam search needs grapheme units; phone models decode greedily")
        seq = prefix_beam_units(log_probs, units, beam, lm, lm_weight)
    else:
        raise DecodeConfigError(f"unknown decode mode {mode!r}")
    return units_to_words(seq, units, lexicon)


def encoder_log_probs(encoder: AcousticEncoder, features: FeatureSequence) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        x = torch.from_numpy(features.frames).unsqueeze(0)
        _, lengths, log_probs = encoder(x, torch.tensor([features.num_frames]))
    encoder.train(was_training)
    if log_probs is None:
        raise DecodeConfigError("encoder has no CTC head")
    return log_probs[0, : int(lengths[0])].numpy()


def decode(
    encoder: AcousticEncoder,
    features: FeatureSequence,
    mode: str = "greedy",
    lm: CharNgramLM | None = None,
    beam: int = 8,
    lm_weight: float = 0.0,
    lexicon: Lexicon | None = None,
) -> list[str]:
    return decode_log_probs(encoder_log_probs(encoder, features), encoder.units, mode, lm, beam, lm_weight, lexicon)


def greedy_decode(encoder: AcousticEncoder, features: FeatureSequence) -> list[str]:
    return decode(encoder, features, "greedy")


def write_hypotheses(path: str | os.PathLike, hyps: Iterable[tuple[str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, words in hyps:
            f.write(f"{utt_id}\t{' '.join(words)}\n")


def read_hypotheses(path: str | os.PathLike) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, words = line.partition("\t")
            out[utt_id] = words.split()
    return out
