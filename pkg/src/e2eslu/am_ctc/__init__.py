"""CTC acoustic modeling: units, loss, encoder, training and decoding."""

from .ctc import InfeasibleTargetError, ctc_loss, ctc_loss_batch
from .decode import decode, greedy_decode
from .encoder import AcousticEncoder, EncoderConfig
from .ngram import CharNgramLM, train_ngram_lm
from .train import AMTrainConfig, adapt_am, pretrain_am
from .units import Lexicon, UnitVocabulary

__all__ = [
    "AMTrainConfig", "AcousticEncoder", "CharNgramLM", "EncoderConfig", "InfeasibleTargetError", "Lexicon",
    "UnitVocabulary", "adapt_am", "ctc_loss", "ctc_loss_batch", "decode", "greedy_decode", "pretrain_am",
    "train_ngram_lm",
]
