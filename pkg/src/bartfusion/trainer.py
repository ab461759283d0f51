"""Teacher-forced training loop with ROUGE-1 early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .audio import LOG_EPS
from .metrics import rouge_n
from .model import BartFusion
from .optim import Adafactor, TrainConfig, lr_schedule
from .tokenizer import EOS, PAD, Vocabulary, decode, encode

logger = logging.getLogger(__name__)

IGNORE_ID = -100
MEL_PAD = float(np.log(LOG_EPS))


@dataclass
class Example:
    """One (lyrics, audio, interpretation) triple; ``mel`` may be ``None``."""

    lyrics: str
    target: str = ""
    mel: Optional[np.ndarray] = None


@dataclass
class Batch:
    src_ids: np.ndarray
    src_mask: np.ndarray
    dec_in: np.ndarray
    dec_mask: np.ndarray
    labels: np.ndarray
    mel: Optional[np.ndarray] = None
    frame_lengths: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.src_ids.shape[0]


def stack_mels(mels: Sequence[np.ndarray]) -> tuple:
    """Pad log-mels on the time axis with the log floor; returns ``(array, lengths)``."""
    lengths = np.array([m.shape[1] for m in mels])
    out = np.full((len(mels), mels[0].shape[0], int(lengths.max())), MEL_PAD, dtype=np.float32)
    for i, m in enumerate(mels):
        out[i, :, : m.shape[1]] = m
    return out, lengths


def _trim(ids: np.ndarray, mask: np.ndarray) -> tuple:
    width = int(mask.sum(axis=1).max())
    return ids[:, :width], mask[:, :width]


def collate(examples: Sequence[Example], vocab: Vocabulary, cfg: TrainConfig, use_audio: bool = True) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    src = [encode(e.lyrics, vocab, cfg.max_source_len) for e in examples]
    tgt = [encode(e.target, vocab, cfg.max_target_len) for e in examples]
    src_ids, src_mask = _trim(np.stack([s[0] for s in src]), np.stack([s[1] for s in src]))
    tgt_ids, tgt_mask = _trim(np.stack([t[0] for t in tgt]), np.stack([t[1] for t in tgt]))
    labels = np.where(tgt_mask[:, 1:], tgt_ids[:, 1:], IGNORE_ID)
    mel = frame_lengths = None
    if use_audio and all(e.mel is not None for e in examples):
        mel, frame_lengths = stack_mels([e.mel for e in examples])
    return Batch(src_ids, src_mask, tgt_ids[:, :-1], tgt_mask[:, :-1], labels, mel, frame_lengths)


def compute_loss(model: BartFusion, batch: Batch) -> ag.Tensor:
    logits = model.forward(batch.src_ids, batch.src_mask, batch.dec_in, batch.dec_mask,
                           batch.mel, batch.frame_lengths)
    return ag.cross_entropy_loss(logits.reshape(-1, logits.shape[-1]), batch.labels.reshape(-1), IGNORE_ID)


def training_step(model: BartFusion, batch: Batch) -> float:
    """Forward + backward; gradients are left on the parameters."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.train()
    model.zero_grad()
    loss = compute_loss(model, batch)
    loss.backward()
    return loss.item()


def generate_texts(model: BartFusion, vocab: Vocabulary, examples: Sequence[Example], cfg: TrainConfig,
                   max_new: int = 128, beam: int = 1, batch_size: int = 32) -> list:
    texts = []
    use_audio = model.audio is not None
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, vocab, cfg, use_audio)
        rows = model.generate(batch.src_ids, batch.src_mask, batch.mel, batch.frame_lengths,
                              max_new=max_new, beam=beam)
        texts.extend(decode(r, vocab) for r in rows)
    return texts


def validation_rouge1(model: BartFusion, vocab: Vocabulary, examples: Sequence[Example], cfg: TrainConfig) -> float:
    """Mean ROUGE-1 F of greedy generations against the references."""
    preds = generate_texts(model, vocab, examples, cfg, max_new=cfg.val_max_new)
    return float(np.mean([rouge_n(p, e.target, 1)[2] for p, e in zip(preds, examples)]))


class EarlyStopping:
    """Track the best score; signal a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.best_state: Optional[dict] = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: float, state: Optional[dict] = None) -> bool:
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_state = None if state is None else {k: v.copy() for k, v in state.items()}
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class FitResult:
    best_epoch: int
    best_score: float
    best_state: dict
    history: list = field(default_factory=list)


def fit(model: BartFusion, vocab: Vocabulary, train: Sequence[Example], valid: Sequence[Example],
        cfg: TrainConfig, score_fn: Optional[Callable] = None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train with AdaFactor, scoring the validation set after every epoch.

    ``score_fn(model, epoch)`` replaces the default validation ROUGE-1 when
    given.  The model is left holding the best epoch's parameters.
    """
    if not train or not valid:
        raise ValueError("training and validation sets must be non-empty")
    use_audio = model.audio is not None
    optimizer = Adafactor(model.parameters())
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    history: list = []
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(train))
        losses, skipped = [], 0
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([train[i] for i in order[start : start + cfg.batch_size]], vocab, cfg, use_audio)
            loss = training_step(model, batch)
            try:
                optimizer.step(lr)
                losses.append(loss)
            except FloatingPointError:
                skipped += 1
                logger.warning("epoch %d: skipped a step with non-finite gradients", epoch)
        try:
            score = score_fn(model, epoch) if score_fn else validation_rouge1(model, vocab, valid, cfg)
        except Exception as exc:
            raise TrainingAborted(f"validation failed after epoch {epoch}: {exc}", history) from exc
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "valid_rouge1": float(score),
            "lr": lr,
            "skipped_steps": skipped,
        }
        history.append(record)
        if on_epoch:
            on_epoch(record)
        logger.info("epoch %d loss %.4f rouge1 %.4f lr %g", epoch, record["loss"], score, lr)
        if stopper.update(epoch, score, model.state_dict()):
            break
    model.load_state_dict(stopper.best_state)
    return FitResult(stopper.best_epoch, stopper.best_score, stopper.best_state, history)
