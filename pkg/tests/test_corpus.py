from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2eslu.corpus import (
    CoverageError,
    DatasetManifest,
    IntentVocabulary,
    ManifestError,
    Provenance,
    UtteranceRecord,
    VocabularyError,
    complement,
    load_manifest,
    parse_manifest,
    save_manifest,
    subset,
    text_only_view,
)


def text_record(i: int, intent: str = "billing", text: str | None = None) -> UtteranceRecord:
    return UtteranceRecord(f"u{i:05d}", text or f"utterance number {i}", (intent,), f"spk{i % 3}")


def make_manifest(n: int, n_intents: int = 4) -> DatasetManifest:
    return DatasetManifest.from_records([text_record(i, f"intent{i % n_intents}") for i in range(n)], "m")


def line(uid: str, text: str = "hello there", intents=("a",), audio=None, duration=0.0) -> str:
    return json.dumps({"id": uid, "audio": audio, "text": text, "intents": list(intents), "speaker": "s",
                       "duration_s": duration, "provenance": "real"})


class TestRecord:
    def test_rejects_empty_transcript(self):
        with pytest.raises(ManifestError):
            UtteranceRecord("a", "   ", ("x",))

    def test_audio_iff_positive_duration(self):
        with pytest.raises(ManifestError):
            UtteranceRecord("a", "hi", ("x",), audio=Path("a.wav"), duration_s=0.0)
        with pytest.raises(ManifestError):
            UtteranceRecord("a", "hi", ("x",), audio=None, duration_s=1.0)
        UtteranceRecord("a", "hi", ("x",), audio=Path("a.wav"), duration_s=1.0)

    def test_negative_duration(self):
        with pytest.raises(ManifestError):
            UtteranceRecord("a", "hi", ("x",), duration_s=-1.0)

    def test_single_intent_accessor(self):
        assert text_record(1).intent == "billing"
        with pytest.raises(ManifestError):
            _ = UtteranceRecord("a", "hi", ("x", "y")).intent


class TestLoad:
    def test_three_lines(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("\n".join(line(f"u{i}") for i in range(3)) + "\n")
        m = load_manifest(p)
        assert len(m) == 3 and m.ids == ["u0", "u1", "u2"]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        m = load_manifest(p)
        assert len(m) == 0 and m.intent_vocab.size == 0

    def test_duplicate_id_names_line_two(self):
        text = line("dup") + "\n" + line("dup") + "\n"
        with pytest.raises(ManifestError) as err:
            parse_manifest(text)
        assert err.value.line == 2
        assert "line 2" in str(err.value)

    def test_malformed_line_number(self):
        text = line("a") + "\n" + line("b") + "\n{not json\n"
        with pytest.raises(ManifestError) as err:
            parse_manifest(text)
        assert err.value.line == 3

    def test_missing_field_is_located(self):
        with pytest.raises(ManifestError) as err:
            parse_manifest(line("a") + "\n" + json.dumps({"id": "b"}) + "\n")
        assert err.value.line == 2

    def test_vocabulary_is_union_of_labels(self):
        text = "\n".join([line("a", intents=("z",)), line("b", intents=("a", "m")), line("c", intents=("a",))])
        assert parse_manifest(text).intent_vocab.labels == ["a", "m", "z"]

    def test_audio_paths_resolve_relative_to_file(self, tmp_path):
        sub = tmp_path / "data"
        sub.mkdir()
        (sub / "m.jsonl").write_text(line("a", audio="wav/a.wav", duration=1.5) + "\n")
        m = load_manifest(sub / "m.jsonl")
        assert m[0].audio == (sub / "wav" / "a.wav").resolve()

    def test_round_trip_is_byte_identical(self, tmp_path):
        m = make_manifest(25)
        p1 = save_manifest(m, tmp_path / "a.jsonl")
        p2 = save_manifest(load_manifest(p1), tmp_path / "b.jsonl")
        assert p1.read_bytes() == p2.read_bytes()
        assert load_manifest(p2).records == m.records

    def test_round_trip_keeps_relative_audio(self, tmp_path):
        wav = tmp_path / "wav" / "x.wav"
        rec = UtteranceRecord("x", "hi", ("a",), "s", wav, 1.0)
        p = save_manifest(DatasetManifest.from_records([rec]), tmp_path / "m.jsonl")
        assert json.loads(p.read_text())["audio"] == "wav/x.wav"
        assert load_manifest(p)[0].audio == wav.resolve()

    def test_total_duration_is_sum(self):
        recs = [UtteranceRecord(f"a{i}", "hi", ("x",), "s", Path(f"{i}.wav"), 0.5 + i) for i in range(4)]
        assert DatasetManifest.from_records(recs).total_duration_s == pytest.approx(0.5 + 1.5 + 2.5 + 3.5)


class TestVocabulary:
    def test_bijective(self):
        v = IntentVocabulary(["b", "a", "c"])
        for i, label in enumerate(v.labels):
            assert v.index(label) == i and v.label(i) == label

    def test_unknown_label(self):
        with pytest.raises(VocabularyError):
            IntentVocabulary(["a"]).index("b")

    def test_duplicates_rejected(self):
        with pytest.raises(VocabularyError):
            IntentVocabulary(["a", "a"])

    def test_training_vocab_is_exactly_present_labels(self):
        m = make_manifest(30, n_intents=7)
        assert m.intent_vocab.labels == sorted({r.intent for r in m})


class TestSubset:
    def test_paper_count(self):
        m = make_manifest(21849, n_intents=29)
        assert len(subset(m, 0.1, seed=0)) == 2184

    def test_fraction_one_is_identity(self):
        m = make_manifest(40)
        assert subset(m, 1.0, 3) is m

    def test_deterministic_and_seed_sensitive(self):
        m = make_manifest(500)
        a, b, c = subset(m, 0.1, 1), subset(m, 0.1, 1), subset(m, 0.1, 2)
        assert a.ids == b.ids
        assert a.ids != c.ids

    def test_preserves_relative_order(self):
        m = make_manifest(300)
        s = subset(m, 0.2, 5)
        positions = [m.ids.index(i) for i in s.ids]
        assert positions == sorted(positions)

    def test_union_with_complement_is_original(self):
        m = make_manifest(321)
        s = subset(m, 0.1, 7)
        rest = complement(m, s)
        assert sorted(s.ids + rest.ids) == sorted(m.ids)
        assert not set(s.ids) & set(rest.ids)

    def test_covers_frequent_classes(self):
        # 9 frequent classes among 200 records, 10% subset of 20
        m = make_manifest(200, n_intents=9)
        for seed in range(5):
            assert {r.intent for r in subset(m, 0.1, seed)} == set(m.intent_vocab.labels)

    def test_rare_classes_may_be_dropped(self):
        recs = [text_record(i, "common") for i in range(99)] + [text_record(99, "rare")]
        s = subset(DatasetManifest.from_records(recs), 0.1, 0)
        assert len(s) == 10

    def test_unsatisfiable_coverage(self):
        # 12 classes with 10 members each cannot all fit in 10 records
        m = make_manifest(120, n_intents=12)
        with pytest.raises(CoverageError) as err:
            subset(m, 1 / 12, 0)
        assert err.value.missing

    def test_too_small(self):
        with pytest.raises(ValueError):
            subset(make_manifest(5), 0.1, 0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(20, 200), frac=st.floats(0.1, 1.0), seed=st.integers(0, 10_000), seed2=st.integers(0, 99))
    def test_subset_of_subset_at_one_is_identity(self, n, frac, seed, seed2):
        m = make_manifest(n, n_intents=2)
        s = subset(m, frac, seed, min_class_count=10**9)
        assert subset(s, 1.0, seed2).records == s.records
        assert len(s) == int(frac * n + 1e-9)


class TestTextOnly:
    def test_drops_audio_keeps_labels(self):
        recs = [UtteranceRecord(f"a{i}", f"text {i}", ("x",), "s", Path(f"{i}.wav"), 1.0) for i in range(5)]
        m = DatasetManifest.from_records(recs)
        t = text_only_view(m)
        assert all(r.audio is None and r.duration_s == 0 for r in t)
        assert [(r.transcript, r.intents) for r in t] == [(r.transcript, r.intents) for r in m]

    def test_idempotent(self):
        m = make_manifest(10)
        assert text_only_view(text_only_view(m)).records == text_only_view(m).records

    def test_empty(self):
        assert len(text_only_view(DatasetManifest())) == 0


def test_provenance_round_trip():
    rec = UtteranceRecord("s1", "hi", ("a",), "tts01", Path("/x/s1.wav"), 1.0, Provenance.SYNTHETIC)
    assert UtteranceRecord.from_json(rec.to_json()) == rec


def test_manifest_rejects_duplicate_ids():
    with pytest.raises(ManifestError):
        DatasetManifest.from_records([text_record(1), text_record(1)])
