from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from e2eslu.checkpoint import load_checkpoint, save_checkpoint
from e2eslu.corpus import IntentVocabulary, ManifestError, UtteranceRecord
from e2eslu.s2i import (
    MultiTaskConfig,
    S2IModel,
    build_s2i,
    classify_intent,
    identity_like_,
    multitask_loss,
    pool_embedding,
    predict_manifest,
    prepare_items,
    read_predictions,
    train_s2i,
    write_predictions,
)
from e2eslu.training import parameter_checksum
from oracles import central_difference, relative_error


@settings(max_examples=30, deadline=None)
@given(lengths=st.lists(st.integers(1, 7), min_size=1, max_size=4), seed=st.integers(0, 1000))
def test_pool_ignores_padding(lengths, seed):
    g = torch.Generator().manual_seed(seed)
    T = max(lengths)
    hidden = torch.randn(len(lengths), T, 3, generator=g)
    pooled = pool_embedding(hidden, torch.tensor(lengths))
    for b, n in enumerate(lengths):
        assert torch.allclose(pooled[b], hidden[b, :n].mean(0), atol=1e-6)
        garbage = hidden.clone()
        garbage[b, n:] = 1e6
        assert torch.allclose(pool_embedding(garbage, torch.tensor(lengths))[b], pooled[b], atol=1e-4)


def test_pool_rejects_empty():
    with pytest.raises(ValueError):
        pool_embedding(torch.zeros(0, 3))
    with pytest.raises(ValueError):
        pool_embedding(torch.zeros(1, 2, 3), torch.tensor([0]))


def test_identity_projection():
    lin = identity_like_(torch.nn.Linear(4, 4))
    x = torch.randn(2, 4)
    assert torch.equal(lin(x), x)
    rect = identity_like_(torch.nn.Linear(6, 4))
    assert torch.allclose(rect.weight @ rect.weight.T, torch.eye(4), atol=1e-5)


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(2)
    for _ in range(5):
        logits = rng.normal(size=(3, 5))
        labels = torch.tensor(rng.integers(0, 5, size=3))

        def f(z):
            return float(F.cross_entropy(torch.from_numpy(z), labels))

        x = torch.tensor(logits, requires_grad=True)
        F.cross_entropy(x, labels).backward()
        assert relative_error(x.grad.numpy(), central_difference(f, logits)) < 1e-3


def test_multitask_terms(toy_am, toy_corpus, store):
    model = build_s2i(toy_am, toy_corpus.intent_vocab)
    items = prepare_items(toy_corpus, model, store)[:6]
    total, ctc, intent = multitask_loss(model, items, 0.5, 2.0)
    assert total.item() == pytest.approx(0.5 * ctc.item() + 2.0 * intent.item(), rel=1e-6)
    _, ctc0, _ = multitask_loss(model, items, 0.0, 1.0)
    assert float(ctc0) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        MultiTaskConfig(ctc_weight=0, intent_weight=0)
    with pytest.raises(ValueError):
        MultiTaskConfig(ctc_weight=-1)


def test_training_and_prediction(toy_am, toy_corpus, store, tmp_path):
    model = train_s2i(toy_am, toy_corpus, MultiTaskConfig(epochs=2, lr=1e-3, batch_size=10), store=store,
                      checkpoint_dir=tmp_path)
    assert len(model.history) == 2
    assert (tmp_path / "s2i-epoch002.pt").exists()
    rows = predict_manifest(model, toy_corpus, store)
    assert [r[0] for r in rows] == toy_corpus.ids
    assert all(r[1] in toy_corpus.intent_vocab for r in rows)
    write_predictions(tmp_path / "p.tsv", rows)
    assert read_predictions(tmp_path / "p.tsv") == {r[0]: r[1] for r in rows}


def test_training_does_not_touch_base_encoder(toy_am, toy_corpus, store):
    before = parameter_checksum(toy_am)
    train_s2i(toy_am, toy_corpus.with_records(list(toy_corpus)[:8]), MultiTaskConfig(epochs=1), store=store)
    assert parameter_checksum(toy_am) == before


def test_deployable_matches_full_model(toy_am, toy_corpus, store, tmp_path):
    model = build_s2i(toy_am, toy_corpus.intent_vocab)
    model.eval()
    slim = model.deployable()
    assert slim.encoder.ctc_head is None and model.encoder.ctc_head is not None
    for r in list(toy_corpus)[:5]:
        label_a, probs_a = classify_intent(model, store.get(r))
        label_b, probs_b = classify_intent(slim, store.get(r))
        assert label_a == label_b and np.allclose(probs_a, probs_b)
    p = save_checkpoint(tmp_path / "slim.pt", "s2i", slim)
    back, _ = load_checkpoint(p, "s2i")
    assert back.encoder.ctc_head is None


def test_multi_intent_training_data_rejected(toy_am, toy_corpus, store):
    bad = toy_corpus.with_records([UtteranceRecord("x", "hi", ("a", "b"), "s", toy_corpus[0].audio, 1.0)])
    with pytest.raises(ManifestError):
        train_s2i(toy_am, bad, MultiTaskConfig(epochs=1), store=store)


def test_union_vocabulary_head(toy_am, toy_corpus):
    vocab = toy_corpus.intent_vocab.union(IntentVocabulary(["zzz_unseen"]))
    model = S2IModel(toy_am, vocab)
    assert model.classifier.linear.out_features == len(toy_corpus.intent_vocab) + 1
