"""Lyrics-plus-audio interpretation generation with a from-scratch numpy stack."""

from .audio import AudioClip, MelSpectrogram, log_mel, read_wav, resample
from .estimators import LogMelExtractor, LyricInterpreter
from .metrics import meteor_lite, mrr, rouge_l, rouge_n, score_pairs
from .model import BartFusion, ModelConfig
from .optim import Adafactor, TrainConfig, lr_schedule
from .retrieval import EmbeddingIndex, EncoderEmbedder, TfidfEmbedder, evaluate_retrieval, query_rank
from .tokenizer import BPETokenizer, Vocabulary, build_vocab, decode, encode
from .trainer import fit

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "MelSpectrogram", "log_mel", "read_wav", "resample",
    "LogMelExtractor", "LyricInterpreter",
    "meteor_lite", "mrr", "rouge_l", "rouge_n", "score_pairs",
    "BartFusion", "ModelConfig",
    "Adafactor", "TrainConfig", "lr_schedule",
    "EmbeddingIndex", "EncoderEmbedder", "TfidfEmbedder", "evaluate_retrieval", "query_rank",
    "BPETokenizer", "Vocabulary", "build_vocab", "decode", "encode",
    "fit",
]
