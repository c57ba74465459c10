"""Output unit inventories (graphemes or phones) and a toy lexicon."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

BLANK = "<b>"

# 39 ARPAbet phones plus silence and four non-speech units
PHONES = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG OW OY P R S SH T TH UH UW V W Y Z ZH "
    "SIL NSN SPN LAU BRH"
).split()
GRAPHEMES = tuple(" '" + "abcdefghijklmnopqrstuvwxyz")


class UnitKind(str, Enum):
    PHONE = "phone"
    GRAPHEME = "grapheme"


class UnitError(ValueError):
    pass


@dataclass(frozen=True)
class UnitVocabulary:
    units: tuple[str, ...]
    blank_index: int = 0
    kind: UnitKind = UnitKind.GRAPHEME

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "kind", UnitKind(self.kind))
        if self.units[self.blank_index] != BLANK:
            raise UnitError(f"unit at blank_index {self.blank_index} is {self.units[self.blank_index]!r}, not blank")
        if self.units.count(BLANK) != 1:
            raise UnitError("blank must appear exactly once")
        if len(set(self.units)) != len(self.units):
            raise UnitError("duplicate units")

    @classmethod
    def graphemes(cls) -> "UnitVocabulary":
        return cls((BLANK,) + GRAPHEMES, 0, UnitKind.GRAPHEME)

    @classmethod
    def phones(cls) -> "UnitVocabulary":
        return cls((BLANK,) + tuple(PHONES), 0, UnitKind.PHONE)

    def __len__(self) -> int:
        return len(self.units)

    @property
    def lexical_units(self) -> tuple[str, ...]:
        return tuple(u for i, u in enumerate(self.units) if i != self.blank_index)

    def index(self, unit: str) -> int:
        try:
            return self.units.index(unit)
        except ValueError:
            raise UnitError(f"unknown unit {unit!r}") from None

    def encode(self, units: Iterable[str]) -> list[int]:
        table = {u: i for i, u in enumerate(self.units)}
        out = []
        for u in units:
            if u not in table or u == BLANK:
                raise UnitError(f"cannot encode unit {u!r}")
            out.append(table[u])
        return out

    def to_json(self) -> dict:
        return {"units": list(self.units), "blank_index": self.blank_index, "kind": self.kind.value}

    @classmethod
    def from_json(cls, obj: dict) -> "UnitVocabulary":
        return cls(tuple(obj["units"]), int(obj["blank_index"]), UnitKind(obj["kind"]))


# Letter-to-sound rules, longest grapheme pattern first.
_LTS_RULES: tuple[tuple[str, tuple[str, ...]], ...] = tuple(
    sorted(
        {
            "tion": ("SH", "AH", "N"), "ough": ("AO",), "igh": ("AY",), "tch": ("CH",), "dge": ("JH",),
            "ch": ("CH",), "sh": ("SH",), "th": ("TH",), "ph": ("F",), "ng": ("NG",), "ck": ("K",),
            "qu": ("K", "W"), "wh": ("W",), "ee": ("IY",), "ea": ("IY",), "oo": ("UW",), "ou": ("AW",),
            "ow": ("OW",), "ai": ("EY",), "ay": ("EY",), "oi": ("OY",), "oy": ("OY",), "au": ("AO",),
            "aw": ("AO",), "er": ("ER",), "ir": ("ER",), "ur": ("ER",), "ar": ("AA", "R"), "or": ("AO", "R"),
            "a": ("AE",), "b": ("B",), "c": ("K",), "d": ("D",), "e": ("EH",), "f": ("F",), "g": ("G",),
            "h": ("HH",), "i": ("IH",), "j": ("JH",), "k": ("K",), "l": ("L",), "m": ("M",), "n": ("N",),
            "o": ("AA",), "p": ("P",), "q": ("K",), "r": ("R",), "s": ("S",), "t": ("T",), "u": ("AH",),
            "v": ("V",), "w": ("W",), "x": ("K", "S"), "y": ("Y",), "z": ("Z",), "'": (),
        }.items(),
        key=lambda kv: -len(kv[0]),
    )
)

TOY_LEXICON = {
    "a": ("AH",), "i": ("AY",), "my": ("M", "AY"), "the": ("DH", "AH"), "to": ("T", "UW"),
    "you": ("Y", "UW"), "bill": ("B", "IH", "L"), "billing": ("B", "IH", "L", "IH", "NG"),
    "need": ("N", "IY", "D"), "want": ("W", "AA", "N", "T"), "account": ("AH", "K", "AW", "N", "T"),
    "pay": ("P", "EY"), "payment": ("P", "EY", "M", "AH", "N", "T"), "cancel": ("K", "AE", "N", "S", "AH", "L"),
    "phone": ("F", "OW", "N"), "help": ("HH", "EH", "L", "P"), "with": ("W", "IH", "DH"),
    "uh": ("AH",), "um": ("AH", "M"), "yes": ("Y", "EH", "S"), "no": ("N", "OW"),
    "password": ("P", "AE", "S", "W", "ER", "D"), "refund": ("R", "IY", "F", "AH", "N", "D"),
}


def letter_to_sound(word: str) -> tuple[str, ...]:
    word = word.lower()
    phones: list[str] = []
    i = 0
    while i < len(word):
        for pattern, out in _LTS_RULES:
            if word.startswith(pattern, i):
                phones.extend(out)
                i += len(pattern)
                break
        else:
            raise UnitError(f"no letter-to-sound rule for {word[i]!r} in {word!r}")
    # collapse doubled consonants ("bill" -> B IH L)
    return tuple(p for k, p in enumerate(phones) if k == 0 or p != phones[k - 1])


class Lexicon:
    """Word -> phone sequence map with optional letter-to-sound fallback."""

    def __init__(self, entries: dict[str, Sequence[str]] | None = None, oov_policy: str = "letter-to-sound"):
        if oov_policy not in ("error", "letter-to-sound"):
            raise ValueError(f"unknown oov policy {oov_policy!r}")
        self.entries = {w: tuple(p) for w, p in (TOY_LEXICON if entries is None else entries).items()}
        self.oov_policy = oov_policy

    def pronounce(self, word: str) -> tuple[str, ...]:
        if word in self.entries:
            return self.entries[word]
        if self.oov_policy == "error":
            raise UnitError(f"out-of-vocabulary word {word!r}")
        return letter_to_sound(word)

    def phones_for(self, transcript: str) -> list[str]:
        return [p for w in transcript.split() for p in self.pronounce(w)]

    def words_from_phones(self, phones: Sequence[str], vocabulary: Iterable[str] | None = None) -> list[str]:
        """Greedy longest-match segmentation of a phone string into words.

        Phones that start no known pronunciation are skipped.
        """
        words = set(self.entries) if vocabulary is None else set(vocabulary)
        prons: dict[tuple[str, ...], str] = {}
        for w in sorted(words):
            prons.setdefault(self.pronounce(w), w)
        longest = max((len(p) for p in prons), default=0)
        out, i = [], 0
        while i < len(phones):
            for n in range(min(longest, len(phones) - i), 0, -1):
                w = prons.get(tuple(phones[i: i + n]))
                if w is not None:
                    out.append(w)
                    i += n
                    break
            else:
                i += 1
        return out


def targets_for(transcript: str, units: UnitVocabulary, lexicon: Lexicon | None = None) -> list[int]:
    """Unit indices for a transcript under the vocabulary's kind."""
    if units.kind == UnitKind.GRAPHEME:
        return units.encode(" ".join(transcript.lower().split()))
    if lexicon is None:
        lexicon = Lexicon()
    return units.encode(lexicon.phones_for(transcript))
