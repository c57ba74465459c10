"""Bidirectional LSTM acoustic encoder with a CTC output head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .units import UnitVocabulary


@dataclass
class EncoderConfig:
    input_dim: int = 40
    layers: int = 4
    hidden_per_direction: int = 128
    bidirectional: bool = True
    dropout: float = 0.1
    # stack this many consecutive frames; 1 keeps the input frame rate
    subsample: int = 1

    @classmethod
    def paper_scale(cls, input_dim: int = 40) -> "EncoderConfig":
        return cls(input_dim=input_dim, layers=6, hidden_per_direction=640, dropout=0.5)

    @property
    def output_dim(self) -> int:
        return self.hidden_per_direction * (2 if self.bidirectional else 1)


class AcousticEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, units: UnitVocabulary):
        super().__init__()
        self.config = config
        self.units = units
        self.lstm = nn.LSTM(
            config.input_dim * config.subsample,
            config.hidden_per_direction,
            num_layers=config.layers,
            bidirectional=config.bidirectional,
            dropout=config.dropout if config.layers > 1 else 0.0,
            batch_first=True,
        )
        self.dropout = nn.Dropout(config.dropout)
        self.ctc_head: nn.Linear | None = nn.Linear(config.output_dim, len(units))

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def _stack(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        k = self.config.subsample
        if k == 1:
            return feats, lengths
        B, T, D = feats.shape
        pad = (-T) % k
        if pad:
            feats = torch.cat([feats, feats.new_zeros(B, pad, D)], dim=1)
        return feats.reshape(B, (T + pad) // k, D * k), (lengths + k - 1) // k

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor, with_ctc: bool = True):
        """Return ``(hidden, out_lengths, log_probs)``.

        ``hidden`` is ``(B, T', output_dim)``; ``log_probs`` is ``(B, T', |units|)``
        or ``None`` when the CTC head is skipped or has been removed.
        """
        feats, lengths = self._stack(feats, lengths)
        packed = pack_padded_sequence(feats, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        hidden, _ = pad_packed_sequence(out, batch_first=True, total_length=feats.shape[1])
        hidden = self.dropout(hidden)
        log_probs = None
        if with_ctc and self.ctc_head is not None:
            log_probs = self.ctc_head(hidden).log_softmax(dim=-1)
        return hidden, lengths, log_probs

    def drop_ctc_head(self) -> None:
        self.ctc_head = None

    def describe(self) -> dict:
        return {"encoder": asdict(self.config), "units": self.units.to_json()}

    @classmethod
    def from_description(cls, desc: dict) -> "AcousticEncoder":
        return cls(EncoderConfig(**desc["encoder"]), UnitVocabulary.from_json(desc["units"]))
