"""Text-to-intent: BPE vocabulary, transformer encoder, MLM and intent training."""

from .bpe import BPETokenizer
from .model import T2IModel, TextEncoder, TextEncoderConfig
from .train import (
    IntentFinetuneConfig,
    MLMConfig,
    build_text_encoder,
    cascade_classify,
    embed_text,
    intent_finetune,
    mlm_finetune,
)

__all__ = [
    "BPETokenizer", "IntentFinetuneConfig", "MLMConfig", "T2IModel", "TextEncoder", "TextEncoderConfig",
    "build_text_encoder", "cascade_classify", "embed_text", "intent_finetune", "mlm_finetune",
]
