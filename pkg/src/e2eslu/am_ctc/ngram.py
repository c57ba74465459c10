"""Character n-gram language model with add-k smoothing."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable

from ..corpus import DatasetManifest
from .units import GRAPHEMES

BOS = "<s>"
EOS = "</s>"


class CharNgramLM:
    """``P(c | h) = (n(h, c) + k) / (n(h) + k |V|)`` over graphemes plus end-of-sentence."""

    def __init__(self, order: int = 3, k: float = 0.01, symbols: Iterable[str] = GRAPHEMES):
        if not 2 <= order <= 5:
            raise ValueError(f"order must be in [2, 5], got {order}")
        self.order = order
        self.k = k
        self.symbols = tuple(symbols) + (EOS,)
        self._sym_set = set(self.symbols)
        self.ngrams: Counter = Counter()
        self.contexts: Counter = Counter()

    def _history(self, prefix: str) -> tuple[str, ...]:
        h = (BOS,) * (self.order - 1) + tuple(prefix)
        return h[len(h) - (self.order - 1):]

    def fit(self, texts: Iterable[str]) -> "CharNgramLM":
        n_texts = 0
        for text in texts:
            text = " ".join(text.lower().split())
            seq = (BOS,) * (self.order - 1) + tuple(c for c in text if c in self._sym_set) + (EOS,)
            for i in range(self.order - 1, len(seq)):
                h = seq[i - self.order + 1: i]
                self.ngrams[h + (seq[i],)] += 1
                self.contexts[h] += 1
            n_texts += 1
        if n_texts == 0:
            raise ValueError("cannot train a language model on an empty corpus")
        return self

    def logprob(self, prefix: str, symbol: str) -> float:
        """Log-probability of ``symbol`` following the text ``prefix``."""
        h = self._history(prefix)
        num = self.ngrams.get(h + (symbol,), 0) + self.k
        den = self.contexts.get(h, 0) + self.k * len(self.symbols)
        return math.log(num / den)

    def score(self, text: str) -> float:
        """Total log-probability of ``text`` including the end symbol."""
        total = 0.0
        for i, c in enumerate(text):
            total += self.logprob(text[:i], c)
        return total + self.logprob(text, EOS)


def train_ngram_lm(text: DatasetManifest, order: int = 3, k: float = 0.01) -> CharNgramLM:
    if len(text) == 0:
        raise ValueError("cannot train a language model on an empty manifest")
    return CharNgramLM(order, k).fit(r.transcript for r in text)
