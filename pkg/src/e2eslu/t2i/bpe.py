"""Word-internal byte-pair encoding.

Vocabulary files hold one token per line: ``<rank>\\t<token>`` for special and
base-character tokens, ``<rank>\\t<token>\\t<left> <right>`` for merges.
"""

from __future__ import annotations

import os
from collections import Counter
from typing import Iterable

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)
EOW = "</w>"


class BPETokenizer:
    def __init__(self, tokens: Iterable[str], merges: Iterable[tuple[str, str]]):
        self.tokens = list(tokens)
        self.merges = [tuple(m) for m in merges]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}
        for special in SPECIALS:
            if special not in self.index:
                raise ValueError(f"vocabulary lacks special token {special}")

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def train(cls, texts: Iterable[str], vocab_size: int = 1000) -> "BPETokenizer":
        words = Counter(w for text in texts for w in text.lower().split())
        alphabet = sorted({c for w in words for c in w})
        tokens = list(SPECIALS) + alphabet + [EOW]
        seqs = {w: list(w) + [EOW] for w in words}
        merges: list[tuple[str, str]] = []
        while len(tokens) < vocab_size:
            pairs: Counter = Counter()
            for w, seq in seqs.items():
                for a, b in zip(seq, seq[1:]):
                    pairs[(a, b)] += words[w]
            if not pairs:
                break
            # most frequent, ties broken lexicographically for determinism
            best, count = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
            if count < 2:
                break
            merged = best[0] + best[1]
            # a second route to an existing token is applied but not recorded,
            # keeping merges and merged tokens one-to-one
            if merged not in tokens:
                merges.append(best)
                tokens.append(merged)
            for w, seq in seqs.items():
                i, out = 0, []
                while i < len(seq):
                    if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                        out.append(merged)
                        i += 2
                    else:
                        out.append(seq[i])
                        i += 1
                seqs[w] = out
        return cls(tokens, merges)

    def _split_word(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        seq = list(word) + [EOW]
        while len(seq) > 1:
            ranked = [(self.ranks.get(p, float("inf")), i) for i, p in enumerate(zip(seq, seq[1:]))]
            rank, i = min(ranked)
            if rank == float("inf"):
                break
            seq = seq[:i] + [seq[i] + seq[i + 1]] + seq[i + 2:]
        self._cache[word] = seq
        return seq

    def tokenize(self, text: str) -> list[str]:
        return [p for w in text.lower().split() for p in self._split_word(w)]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in self.tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        pieces = [self.tokens[i] for i in ids if self.tokens[i] not in SPECIALS]
        return "".join(pieces).replace(EOW, " ").strip()

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_json(cls, obj: dict) -> "BPETokenizer":
        return cls(obj["tokens"], [tuple(m) for m in obj["merges"]])

    def save(self, path: str | os.PathLike) -> None:
        merge_of = {a + b: (a, b) for a, b in self.merges}
        with open(path, "w", encoding="utf-8") as f:
            for rank, tok in enumerate(self.tokens):
                if tok in merge_of:
                    a, b = merge_of[tok]
                    f.write(f"{rank}\t{tok}\t{a} {b}\n")
                else:
                    f.write(f"{rank}\t{tok}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BPETokenizer":
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                rows.append((int(parts[0]), parts[1], parts[2].split(" ") if len(parts) > 2 else None))
        rows.sort()
        tokens = [tok for _, tok, _ in rows]
        merges = [tuple(m) for _, _, m in rows if m is not None]
        return cls(tokens, merges)
