from __future__ import annotations

import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from e2eslu.am_ctc.ctc import InfeasibleTargetError, ctc_loss, ctc_loss_batch, is_feasible, min_frames
from oracles import brute_force_ctc_nll, central_difference, relative_error


def random_log_probs(rng: np.random.Generator, T: int, V: int) -> np.ndarray:
    x = rng.normal(size=(T, V)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def random_instance(rng: np.random.Generator, max_T: int = 6, max_units: int = 4):
    V = int(rng.integers(2, max_units + 2))
    T = int(rng.integers(1, max_T + 1))
    while True:
        L = int(rng.integers(0, T + 1))
        target = rng.integers(1, V, size=L).tolist()
        if is_feasible(T, target):
            return random_log_probs(rng, T, V), target


def test_min_frames():
    assert min_frames([]) == 0
    assert min_frames([1, 2, 3]) == 3
    assert min_frames([1, 1]) == 3
    assert min_frames([2, 2, 2, 3, 3]) == 8


def test_matches_brute_force_small():
    rng = np.random.default_rng(11)
    for _ in range(50):
        lp, target = random_instance(rng)
        got = float(ctc_loss(torch.from_numpy(lp), target))
        assert got == pytest.approx(brute_force_ctc_nll(lp, target), abs=1e-6)


def test_empty_target_is_all_blank():
    lp = random_log_probs(np.random.default_rng(0), 5, 3)
    assert float(ctc_loss(torch.from_numpy(lp), [])) == pytest.approx(-lp[:, 0].sum(), abs=1e-9)


def test_infeasible_raises():
    lp = torch.log_softmax(torch.zeros(2, 3, dtype=torch.float64), dim=1)
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 1])
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 2, 1])


def test_rejects_blank_in_target():
    lp = torch.log_softmax(torch.zeros(4, 3, dtype=torch.float64), dim=1)
    with pytest.raises(ValueError):
        ctc_loss(lp, [0, 1])


def test_batch_respects_lengths():
    rng = np.random.default_rng(3)
    a, b = random_log_probs(rng, 6, 4), random_log_probs(rng, 4, 4)
    padded = np.zeros((2, 6, 4))
    padded[0], padded[1, :4] = a, b
    padded[1, 4:] = np.log(0.25)
    out = ctc_loss_batch(torch.from_numpy(padded), [6, 4], [[1, 2], [3]])
    assert float(out[0]) == pytest.approx(brute_force_ctc_nll(a, [1, 2]), abs=1e-9)
    assert float(out[1]) == pytest.approx(brute_force_ctc_nll(b, [3]), abs=1e-9)


def test_agrees_with_torch_builtin():
    rng = np.random.default_rng(5)
    T, V = 30, 8
    lps = [random_log_probs(rng, T, V) for _ in range(4)]
    targets = [rng.integers(1, V, size=n).tolist() for n in (3, 7, 1, 10)]
    x = torch.from_numpy(np.stack(lps))
    ours = ctc_loss_batch(x, [T] * 4, targets)
    flat = torch.tensor(sum(targets, []))
    ref = torch.nn.functional.ctc_loss(x.transpose(0, 1), flat, torch.full((4,), T), torch.tensor([len(t) for t in targets]),
                                       reduction="none", zero_infinity=False)
    assert torch.allclose(ours, ref, atol=1e-8)


def test_gradient_finite_difference():
    rng = np.random.default_rng(7)
    for _ in range(5):
        logits = rng.normal(size=(5, 4))
        target = [1, 3]

        def f(z):
            return float(ctc_loss(torch.log_softmax(torch.from_numpy(z), dim=1), target))

        x = torch.tensor(logits, requires_grad=True)
        ctc_loss(torch.log_softmax(x, dim=1), target).backward()
        assert relative_error(x.grad.numpy(), central_difference(f, logits)) < 1e-3


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_loss_is_nonnegative_and_finite(seed):
    lp, target = random_instance(np.random.default_rng(seed))
    loss = float(ctc_loss(torch.from_numpy(lp), target))
    assert np.isfinite(loss) and loss >= -1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_probabilities_over_all_labelings_sum_to_one(seed):
    # every frame path collapses to exactly one labeling of length <= T
    rng = np.random.default_rng(seed)
    T, V = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    lp = torch.from_numpy(random_log_probs(rng, T, V))
    total = 0.0
    for L in range(T + 1):
        for target in itertools.product(range(1, V), repeat=L):
            if is_feasible(T, target):
                total += float(torch.exp(-ctc_loss(lp, list(target))))
    assert total == pytest.approx(1.0, abs=1e-9)
