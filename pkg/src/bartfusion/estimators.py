"""Estimator-style wrappers around feature extraction and the fusion model."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .audio import N_MELS, AudioClip, log_mel, read_wav
from .checkpoint import load_tensors, save_tensors
from .metrics import rouge_n
from .model import BartFusion, ModelConfig
from .optim import TrainConfig
from .tokenizer import ConfigError, Vocabulary, build_vocab
from .trainer import Example, fit, generate_texts

CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.txt"


def check_pairs(X, n_mels: int = N_MELS) -> list:
    """Normalise ``X`` to ``(lyrics, mel or None)`` pairs.

    Items may be plain lyric strings or ``(lyrics, mel)`` tuples; mels must be
    ``[n_mels, frames]`` arrays.
    """
    if isinstance(X, str):
        raise TypeError("X must be a sequence of items, not a single string")
    pairs = []
    for k, item in enumerate(X):
        if isinstance(item, str):
            lyrics, mel = item, None
        else:
            try:
                lyrics, mel = item
            except (TypeError, ValueError):
                raise TypeError(f"item {k}: expected a string or a (lyrics, mel) pair") from None
        if not isinstance(lyrics, str) or not lyrics.strip():
            raise ValueError(f"item {k}: lyrics must be a non-empty string")
        if mel is not None:
            mel = np.asarray(mel, dtype=np.float32)
            if mel.ndim != 2 or mel.shape[0] != n_mels:
                raise ValueError(f"item {k}: mel must have shape [{n_mels}, frames], got {mel.shape}")
            if not np.all(np.isfinite(mel)):
                raise ValueError(f"item {k}: mel contains non-finite values")
        pairs.append((lyrics, mel))
    if not pairs:
        raise ValueError("empty input")
    return pairs


def check_targets(y, n: int) -> list:
    targets = [str(t) for t in y]
    if len(targets) != n:
        raise ValueError(f"{n} inputs but {len(targets)} targets")
    if not all(t.strip() for t in targets):
        raise ValueError("targets must be non-empty strings")
    return targets


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Map audio (clips, WAV paths or ``(samples, rate)`` pairs) to log-mel arrays."""

    def __init__(self, n_mels: int = N_MELS):
        self.n_mels = n_mels

    def fit(self, X=None, y=None):
        return self

    def _clip(self, item) -> AudioClip:
        if isinstance(item, AudioClip):
            return item
        if isinstance(item, (str, Path)):
            return read_wav(item)
        samples, rate = item
        return AudioClip(samples, int(rate))

    def transform(self, X) -> list:
        return [log_mel(self._clip(item), self.n_mels).values for item in X]


class LyricInterpreter(BaseEstimator):
    """Lyrics (plus optional audio) to interpretation text.

    Parameters
    ----------
    profile : {"toy", "full"}
        Model size preset.
    use_audio : bool
        Fuse audio into the encoder; ``False`` trains the text-only baseline.
    vocab_size : int
        BPE table cap, learned from the training lyrics and targets.
    max_source_len, max_target_len : int
        Token limits, further capped by the profile's position tables.
    lr_initial, lr_reduced, reduce_at_epoch, max_epochs, patience, batch_size :
        Optimisation schedule.
    valid_fraction : float
        Share of the training pairs held out for early stopping when no
        ``eval_set`` is given.
    beam, max_new_tokens : int
        Decoding settings used by ``predict``.
    seed : int
        Seeds initialisation, shuffling and the validation hold-out.
    """

    def __init__(self, profile: str = "toy", use_audio: bool = True, vocab_size: int = 8192,
                 max_source_len: int = 2048, max_target_len: int = 512, lr_initial: float = 6e-4,
                 lr_reduced: float = 6e-5, reduce_at_epoch: int = 11, max_epochs: int = 20,
                 patience: int = 3, batch_size: int = 8, valid_fraction: float = 0.1,
                 beam: int = 1, max_new_tokens: int = 128, seed: int = 0):
        self.profile = profile
        self.use_audio = use_audio
        self.vocab_size = vocab_size
        self.max_source_len = max_source_len
        self.max_target_len = max_target_len
        self.lr_initial = lr_initial
        self.lr_reduced = lr_reduced
        self.reduce_at_epoch = reduce_at_epoch
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.valid_fraction = valid_fraction
        self.beam = beam
        self.max_new_tokens = max_new_tokens
        self.seed = seed

    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.profile(self.profile, vocab_size=vocab_size, use_audio=self.use_audio)

    def _train_config(self) -> TrainConfig:
        cfg = self.model_.cfg
        return TrainConfig(
            lr_initial=self.lr_initial, lr_reduced=self.lr_reduced, reduce_at_epoch=self.reduce_at_epoch,
            max_epochs=self.max_epochs, patience=self.patience, batch_size=self.batch_size, seed=self.seed,
            max_source_len=min(self.max_source_len, cfg.max_positions),
            max_target_len=min(self.max_target_len, cfg.max_target_positions),
            val_max_new=self.max_new_tokens,
        )

    def _examples(self, pairs, targets=None) -> list:
        targets = targets or [""] * len(pairs)
        return [Example(lyr, tgt, mel if self.use_audio else None) for (lyr, mel), tgt in zip(pairs, targets)]

    def fit(self, X, y, eval_set: Optional[tuple] = None, on_epoch=None):
        pairs = check_pairs(X)
        targets = check_targets(y, len(pairs))
        if self.use_audio and any(mel is None for _, mel in pairs):
            raise ValueError("use_audio=True needs a mel spectrogram for every item")
        if eval_set is not None:
            v_pairs = check_pairs(eval_set[0])
            v_targets = check_targets(eval_set[1], len(v_pairs))
        else:
            if not 0.0 < self.valid_fraction < 1.0:
                raise ConfigError("valid_fraction must lie in (0, 1)")
            order = np.random.default_rng(self.seed).permutation(len(pairs))
            n_valid = max(1, int(round(self.valid_fraction * len(pairs))))
            if n_valid >= len(pairs):
                raise ValueError("too few pairs to hold out a validation set")
            held = set(order[:n_valid].tolist())
            v_pairs = [pairs[i] for i in sorted(held)]
            v_targets = [targets[i] for i in sorted(held)]
            pairs = [p for i, p in enumerate(pairs) if i not in held]
            targets = [t for i, t in enumerate(targets) if i not in held]
        self.vocab_ = build_vocab([lyr for lyr, _ in pairs] + targets, self.vocab_size)
        self.model_ = BartFusion(self._model_config(len(self.vocab_)), seed=self.seed)
        result = fit(self.model_, self.vocab_, self._examples(pairs, targets),
                     self._examples(v_pairs, v_targets), self._train_config(), on_epoch=on_epoch)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_score_ = result.best_score
        return self

    def _check_fitted(self) -> None:
        if getattr(self, "model_", None) is None:
            raise NotFittedError("LyricInterpreter is not fitted yet")

    def predict(self, X, batch_size: int = 16) -> list:
        self._check_fitted()
        pairs = check_pairs(X)
        if self.use_audio and any(mel is None for _, mel in pairs):
            raise ValueError("this model was trained with audio; every item needs a mel")
        return generate_texts(self.model_, self.vocab_, self._examples(pairs), self._train_config(),
                              max_new=self.max_new_tokens, beam=self.beam, batch_size=batch_size)

    def score(self, X, y) -> float:
        """Mean ROUGE-1 F of predictions against ``y``."""
        preds = self.predict(X)
        refs = check_targets(y, len(preds))
        return float(np.mean([rouge_n(p, r, 1)[2] for p, r in zip(preds, refs)]))

    def save(self, path) -> Path:
        self._check_fitted()
        meta = {"kind": "lyric-interpreter", "best_epoch": str(self.best_epoch_)}
        path = save_tensors(path, self.model_.state_dict(), meta)
        config = {"params": self.get_params(), "model": json.loads(self.model_.cfg.to_json())}
        (path / CONFIG_FILE).write_text(json.dumps(config, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        self.vocab_.save(path / VOCAB_FILE)
        return path

    @classmethod
    def load(cls, path) -> "LyricInterpreter":
        path = Path(path)
        config = json.loads((path / CONFIG_FILE).read_text(encoding="utf-8"))
        est = cls(**config["params"])
        est.vocab_ = Vocabulary.load(path / VOCAB_FILE)
        est.model_ = BartFusion(ModelConfig(**config["model"]), seed=est.seed)
        tensors, meta = load_tensors(path)
        est.model_.load_state_dict(tensors)
        est.best_epoch_ = int(meta.get("best_epoch", 0))
        est.history_ = []
        return est
