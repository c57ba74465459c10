"""Shared training plumbing: seeding, batching, optimizers."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .frontend import FeatureSequence

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 5.0
    seed: int = 0
    deterministic: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def batch_order(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Deterministic minibatch index sequence for one epoch."""
    idx = np.arange(n)
    if shuffle:
        idx = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield idx[start: start + batch_size]


def pad_features(feats: Sequence[FeatureSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack into ``(B, T_max, D)`` zero-padded, plus true lengths."""
    lengths = torch.tensor([f.num_frames for f in feats], dtype=torch.long)
    out = torch.zeros(len(feats), int(lengths.max()), feats[0].dim)
    for i, f in enumerate(feats):
        out[i, : f.num_frames] = torch.from_numpy(f.frames)
    return out, lengths


def clip_and_step(optimizer: torch.optim.Optimizer, params, clip_norm: float) -> None:
    if clip_norm and clip_norm > 0:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], clip_norm)
    optimizer.step()


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
