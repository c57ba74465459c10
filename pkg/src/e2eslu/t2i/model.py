"""Transformer text encoder and the text-to-intent classifier built on it."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from ..corpus import IntentVocabulary
from ..s2i import IntentClassifier
from .bpe import BPETokenizer

logger = logging.getLogger(__name__)


@dataclass
class TextEncoderConfig:
    width: int = 256
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    max_len: int = 128
    vocab_size: int = 1000


class TextEncoder(nn.Module):
    """Pre-norm transformer; position 0 holds ``[CLS]``, whose output is the text embedding."""

    def __init__(self, tokenizer: BPETokenizer, config: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        self.tokenizer = tokenizer
        self.config = config
        V, W = len(tokenizer), config.width
        self.tok_emb = nn.Embedding(V, W, padding_idx=tokenizer.pad_id)
        self.pos_emb = nn.Embedding(config.max_len, W)
        layer = nn.TransformerEncoderLayer(
            W, config.heads, config.ff_mult * W, config.dropout, batch_first=True, norm_first=True, activation="gelu"
        )
        self.layers = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(W)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.mlm_head = nn.Linear(W, V)

    @property
    def width(self) -> int:
        return self.config.width

    def token_ids(self, text: str) -> list[int]:
        """``[CLS] pieces... [SEP]``, truncated to ``max_len``; empty text becomes ``[UNK]``."""
        tok = self.tokenizer
        body = tok.encode(text) or [tok.unk_id]
        limit = self.config.max_len - 2
        if len(body) > limit:
            logger.warning("truncating %d tokens to %d", len(body), limit)
            body = body[:limit]
        return [tok.cls_id] + body + [tok.sep_id]

    def batch_ids(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        return self.pad_ids([self.token_ids(t) for t in texts])

    def pad_ids(self, seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded ids ``(B, L)`` and a boolean mask that is True at padding."""
        L = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), L), self.tokenizer.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        pad = torch.arange(L).unsqueeze(0) >= torch.tensor([len(s) for s in seqs]).unsqueeze(1)
        return ids, pad

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if pad_mask is None:
            pad_mask = ids == self.tokenizer.pad_id
        pos = torch.arange(ids.shape[1]).unsqueeze(0)
        x = self.emb_dropout(self.tok_emb(ids) + self.pos_emb(pos))
        return self.norm(self.layers(x, src_key_padding_mask=pad_mask))

    def cls_embedding(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward(ids, pad_mask)[:, 0]

    def describe(self) -> dict:
        return {"text_encoder": asdict(self.config), "tokenizer": self.tokenizer.to_json()}

    @classmethod
    def from_description(cls, desc: dict) -> "TextEncoder":
        return cls(BPETokenizer.from_json(desc["tokenizer"]), TextEncoderConfig(**desc["text_encoder"]))


class T2IModel(nn.Module):
    def __init__(self, encoder: TextEncoder, intent_vocab: IntentVocabulary):
        super().__init__()
        self.encoder = encoder
        self.classifier = IntentClassifier(encoder.width, intent_vocab)

    @property
    def intent_vocab(self) -> IntentVocabulary:
        return self.classifier.intent_vocab

    def embed(self, texts: Sequence[str]) -> torch.Tensor:
        ids, pad = self.encoder.batch_ids(texts)
        return self.encoder.cls_embedding(ids, pad)

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        return self.classifier(self.embed(texts))

    def describe(self) -> dict:
        return {**self.encoder.describe(), "intents": list(self.intent_vocab.labels)}

    @classmethod
    def from_description(cls, desc: dict) -> "T2IModel":
        return cls(TextEncoder.from_description(desc), IntentVocabulary(desc["intents"]))
