"""Self-describing checkpoint archives.

An archive is a ``torch.save`` dict with keys ``format``, ``kind``,
``description`` (architecture + vocabularies, plain JSON types),
``state_dict`` and ``meta`` (training config, seed, metrics).
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

FORMAT = "e2eslu-checkpoint/1"


def save_checkpoint(path: str | os.PathLike, kind: str, model, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": FORMAT,
        "kind": kind,
        "description": model.describe(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(archive, tmp)
    os.replace(tmp, path)
    return path


def read_archive(path: str | os.PathLike) -> dict:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise ValueError(f"{path}: not an {FORMAT} archive")
    return archive


def load_checkpoint(path: str | os.PathLike, expected_kind: str | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    from .am_ctc.encoder import AcousticEncoder
    from .s2i import S2IModel
    from .t2i.model import T2IModel, TextEncoder

    builders = {
        "acoustic_encoder": AcousticEncoder.from_description,
        "s2i": S2IModel.from_description,
        "text_encoder": TextEncoder.from_description,
        "t2i": T2IModel.from_description,
    }
    archive = read_archive(path)
    kind = archive["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise ValueError(f"{path}: expected a {expected_kind!r} checkpoint, found {kind!r}")
    model = builders[kind](archive["description"])
    model.load_state_dict(archive["state_dict"])
    model.eval()
    return model, archive["meta"]


class CheckpointStore:
    """Directory of archives addressed by id (``<root>/<id>.pt``)."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, checkpoint_id: str) -> Path:
        return self.root / f"{checkpoint_id}.pt"

    def save(self, checkpoint_id: str, kind: str, model, meta: dict | None = None) -> Path:
        return save_checkpoint(self.path(checkpoint_id), kind, model, meta)

    def load(self, checkpoint_id: str, expected_kind: str | None = None):
        return load_checkpoint(self.path(checkpoint_id), expected_kind)

    def __contains__(self, checkpoint_id: str) -> bool:
        return self.path(checkpoint_id).exists()
