"""CTC loss by the log-space forward recursion.

The recursion runs over the blank-expanded target ``b l1 b l2 ... lL b`` and
is written with differentiable tensor ops, so autograd supplies the
gradient with respect to the per-frame log-probabilities.
"""

from __future__ import annotations

from typing import Sequence

import torch

# large finite stand-in for log(0); keeps logsumexp gradients finite
_NEG = -1e30


class InfeasibleTargetError(ValueError):
    """No CTC alignment of the target fits in the available frames."""


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(num_frames: int, target: Sequence[int]) -> bool:
    return num_frames >= min_frames(target)


def ctc_loss_batch(
    log_probs: torch.Tensor,
    input_lengths: Sequence[int] | torch.Tensor,
    targets: Sequence[Sequence[int]],
    blank: int = 0,
) -> torch.Tensor:
    """Negative log-likelihood per utterance, shape ``(B,)``.

    ``log_probs`` is ``(B, T, V)`` and must already be normalized per frame.
    Raises ``InfeasibleTargetError`` if any target cannot be aligned.
    """
    B, T, V = log_probs.shape
    lengths = torch.as_tensor(input_lengths, dtype=torch.long)
    for b, tgt in enumerate(targets):
        if not is_feasible(int(lengths[b]), tgt):
            raise InfeasibleTargetError(
                f"target of length {len(tgt)} needs {min_frames(tgt)} frames, only {int(lengths[b])} available"
            )
        if any(u == blank or not 0 <= u < V for u in tgt):
            raise ValueError(f"target contains blank or out-of-range unit: {list(tgt)}")

    L = max((len(t) for t in targets), default=0)
    S = 2 * L + 1
    ext = torch.full((B, S), blank, dtype=torch.long)
    for b, tgt in enumerate(targets):
        if len(tgt):
            ext[b, 1: 2 * len(tgt): 2] = torch.as_tensor(list(tgt), dtype=torch.long)
    skip = torch.zeros((B, S), dtype=torch.bool)
    if S > 2:
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = log_probs.gather(2, ext.unsqueeze(1).expand(B, T, S))
    neg = log_probs.new_full((), _NEG)
    neg1 = log_probs.new_full((B, 1), _NEG)
    neg2 = log_probs.new_full((B, 2), _NEG)

    init_mask = torch.zeros(S, dtype=torch.bool)
    init_mask[: min(2, S)] = True
    alpha = torch.where(init_mask.unsqueeze(0), emit[:, 0], neg)
    for t in range(1, T):
        from_prev = torch.cat([neg1, alpha[:, :-1]], dim=1)
        if S > 2:
            from_skip = torch.where(skip, torch.cat([neg2, alpha[:, :-2]], dim=1), neg)
        else:
            from_skip = torch.full_like(alpha, _NEG)
        new = torch.logsumexp(torch.stack([alpha, from_prev, from_skip]), dim=0) + emit[:, t]
        alpha = torch.where((t < lengths).unsqueeze(1), new, alpha)

    tgt_len = torch.as_tensor([len(t) for t in targets], dtype=torch.long)
    last = alpha.gather(1, (2 * tgt_len).unsqueeze(1)).squeeze(1)
    prev_idx = (2 * tgt_len - 1).clamp(min=0)
    prev = torch.where(tgt_len > 0, alpha.gather(1, prev_idx.unsqueeze(1)).squeeze(1), neg)
    return -torch.logaddexp(last, prev)


def ctc_loss(log_probs: torch.Tensor, target: Sequence[int], blank: int = 0) -> torch.Tensor:
    """CTC negative log-likelihood of one ``(T, V)`` utterance."""
    log_probs = torch.as_tensor(log_probs)
    if log_probs.dim() != 2:
        raise ValueError(f"expected a (T, V) matrix, got shape {tuple(log_probs.shape)}")
    return ctc_loss_batch(log_probs.unsqueeze(0), [log_probs.shape[0]], [list(target)], blank)[0]
