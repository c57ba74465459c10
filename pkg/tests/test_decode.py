from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from e2eslu.am_ctc import AcousticEncoder, EncoderConfig, UnitVocabulary, decode, train_ngram_lm
from e2eslu.am_ctc.ctc import ctc_loss
from e2eslu.am_ctc.decode import (
    DecodeConfigError,
    decode_log_probs,
    greedy_units,
    prefix_beam_units,
    read_hypotheses,
    units_to_words,
    write_hypotheses,
)
from e2eslu.am_ctc.ngram import EOS, CharNgramLM
from e2eslu.am_ctc.units import GRAPHEMES, Lexicon, UnitError, letter_to_sound, targets_for
from e2eslu.corpus import DatasetManifest, UtteranceRecord
from e2eslu.frontend import FeatureSequence
from oracles import brute_force_best_path

TINY = UnitVocabulary(("<b>", "a", "b"))


def log_softmax(x: np.ndarray) -> np.ndarray:
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


class TestUnits:
    def test_grapheme_inventory(self):
        u = UnitVocabulary.graphemes()
        assert len(u) == 29 and u.units[0] == "<b>"

    def test_phone_inventory(self):
        assert len(UnitVocabulary.phones()) == 45

    def test_blank_required(self):
        with pytest.raises(UnitError):
            UnitVocabulary(("a", "b"))

    def test_grapheme_targets_round_trip(self):
        u = UnitVocabulary.graphemes()
        seq = targets_for("Pay  my BILL", u)
        assert units_to_words(seq, u) == ["pay", "my", "bill"]

    def test_phone_targets_use_lexicon(self):
        u = UnitVocabulary.phones()
        seq = targets_for("pay bill", u)
        assert [u.units[i] for i in seq] == ["P", "EY", "B", "IH", "L"]
        assert units_to_words(seq, u) == ["pay", "bill"]

    def test_letter_to_sound_fallback(self):
        assert letter_to_sound("chat") == ("CH", "AE", "T")
        with pytest.raises(UnitError):
            Lexicon(oov_policy="error").pronounce("zebra")


class TestGreedy:
    def test_collapse(self):
        # frames: a a <b> a b b
        frames = np.full((6, 3), -10.0)
        for t, u in enumerate([1, 1, 0, 1, 2, 2]):
            frames[t, u] = 0.0
        assert greedy_units(frames) == [1, 1, 2]

    def test_all_blank(self):
        frames = np.zeros((4, 3))
        frames[:, 0] = 5
        assert greedy_units(frames) == []


class TestPrefixBeam:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_wide_beam_finds_most_probable_labeling(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 5))
        lp = log_softmax(rng.normal(size=(T, 3)) * 2)
        best = prefix_beam_units(lp, TINY, beam=64)
        oracle = brute_force_best_path(lp)
        # ties between labelings are possible; compare probabilities, not sequences
        p_best = math.exp(-float(ctc_loss(torch.from_numpy(lp), best)))
        p_oracle = math.exp(-float(ctc_loss(torch.from_numpy(lp), list(oracle))))
        assert p_best == pytest.approx(p_oracle, rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_beam_one_equals_greedy_on_peaky_output(self, seed):
        rng = np.random.default_rng(seed)
        T, V = int(rng.integers(1, 12)), 5
        winners = rng.integers(0, V, size=T)
        probs = np.full((T, V), 0.05 / (V - 1))
        probs[np.arange(T), winners] = 0.95
        lp = np.log(probs)
        units = UnitVocabulary(("<b>", "a", "b", "c", "d"))
        assert prefix_beam_units(lp, units, beam=1) == greedy_units(lp)

    def test_beam_one_can_differ_from_greedy(self):
        # greedy takes 'b' in frame 2, but staying on 'a' (blank or repeat) has mass 0.6
        probs = np.array([[0.0, 1.0, 0.0], [0.3, 0.3, 0.4]])
        lp = np.log(np.maximum(probs, 1e-300))
        assert greedy_units(lp) == [1, 2]
        assert prefix_beam_units(lp, TINY, beam=1) == [1]

    def test_invalid_beam(self):
        with pytest.raises(DecodeConfigError):
            prefix_beam_units(np.zeros((2, 3)), TINY, beam=0)
        with pytest.raises(DecodeConfigError):
            decode_log_probs(np.zeros((2, 3)), TINY, mode="prefix_beam", beam=0)

    def test_unknown_mode(self):
        with pytest.raises(DecodeConfigError):
            decode_log_probs(np.zeros((2, 3)), TINY, mode="viterbi")

    def test_lm_changes_ambiguous_choice(self):
        units = UnitVocabulary.graphemes()
        lm = CharNgramLM(order=3, k=0.01).fit(["ab"] * 50)
        i_a, i_b, i_c = units.index("a"), units.index("b"), units.index("c")
        lp = np.full((2, len(units)), -30.0)
        lp[0, i_a] = 0.0
        lp[1, i_b], lp[1, i_c] = math.log(0.45), math.log(0.55)
        lp = log_softmax(lp)
        assert decode_log_probs(lp, units, "prefix_beam", beam=8) == ["ac"]
        assert decode_log_probs(lp, units, "prefix_beam", lm=lm, beam=8, lm_weight=0.5) == ["ab"]


class TestNgram:
    def test_distribution_normalizes(self):
        lm = CharNgramLM(order=3, k=0.1).fit(["hello world", "help me"])
        for prefix in ["", "he", "xyz", "hello world"]:
            total = sum(math.exp(lm.logprob(prefix, s)) for s in GRAPHEMES + (EOS,))
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            CharNgramLM().fit([])
        with pytest.raises(ValueError):
            train_ngram_lm(DatasetManifest())

    def test_prefers_seen_text(self):
        m = DatasetManifest.from_records([UtteranceRecord(f"t{i}", "pay my bill", ("pay",)) for i in range(5)])
        lm = train_ngram_lm(m, order=3)
        assert lm.score("pay my bill") > lm.score("bill my pay")

    def test_bad_order(self):
        with pytest.raises(ValueError):
            CharNgramLM(order=1)


def test_hypotheses_round_trip(tmp_path):
    hyps = [("u1", ["pay", "bill"]), ("u2", [])]
    write_hypotheses(tmp_path / "h.tsv", hyps)
    assert read_hypotheses(tmp_path / "h.tsv") == {"u1": ["pay", "bill"], "u2": []}


def test_decode_without_ctc_head_is_error():
    enc = AcousticEncoder(EncoderConfig(layers=1, hidden_per_direction=8, dropout=0.0), UnitVocabulary.graphemes())
    enc.drop_ctc_head()
    with pytest.raises(DecodeConfigError):
        decode(enc, FeatureSequence(np.zeros((10, 40), dtype=np.float32), 10.0))
