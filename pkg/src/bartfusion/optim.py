"""AdaFactor with factored second moments and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .tokenizer import ConfigError


@dataclass
class TrainConfig:
    lr_initial: float = 6e-4
    lr_reduced: float = 6e-5
    reduce_at_epoch: int = 11
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 8
    seed: int = 0
    max_source_len: int = 2048
    max_target_len: int = 512
    val_max_new: int = 128

    def __post_init__(self):
        if not 1 <= self.reduce_at_epoch <= self.max_epochs:
            raise ConfigError(f"reduce_at_epoch must lie in [1, max_epochs={self.max_epochs}]")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based epoch: a single step down at ``reduce_at_epoch``."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return cfg.lr_initial if epoch < cfg.reduce_at_epoch else cfg.lr_reduced


def factored_second_moment(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Rank-1 reconstruction ``row col^T / mean(row)`` from row/column means."""
    return row[:, None] * (col / row.mean())[None, :]


class Adafactor:
    """AdaFactor without momentum and without relative step sizing.

    Matrices keep exponential averages of the row and column means of
    ``g**2 + eps1``; every other shape keeps the full average.  The
    normalised update (computed in float64) is clipped to RMS ``clip_threshold`` and scaled by the
    learning rate passed to :meth:`step`.  The averaging rate at step ``t``
    is ``1 - t ** -decay_rate``.
    """

    def __init__(self, params: Sequence[Tensor], eps1: float = 1e-30, clip_threshold: float = 1.0,
                 decay_rate: float = 0.8):
        self.params = list(params)
        self.eps1 = eps1
        self.clip_threshold = clip_threshold
        self.decay_rate = decay_rate
        self.step_count = 0
        self.state: list = [{} for _ in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        """Apply one update; non-finite gradients raise before anything changes."""
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError("non-finite gradient; update skipped")
        self.step_count += 1
        beta2 = 1.0 - self.step_count ** (-self.decay_rate)
        for p, state in zip(self.params, self.state):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            g2 = g * g + self.eps1
            if g.ndim == 2:
                if not state:
                    state["row"] = np.zeros(g.shape[0])
                    state["col"] = np.zeros(g.shape[1])
                state["row"] = beta2 * state["row"] + (1.0 - beta2) * g2.mean(axis=1)
                state["col"] = beta2 * state["col"] + (1.0 - beta2) * g2.mean(axis=0)
                v = factored_second_moment(state["row"], state["col"])
            else:
                if not state:
                    state["v"] = np.zeros_like(g)
                state["v"] = beta2 * state["v"] + (1.0 - beta2) * g2
                v = state["v"]
            update = g / np.sqrt(v)
            rms = np.sqrt(np.mean(update * update))
            update = update / max(1.0, rms / self.clip_threshold)
            p.data = (p.data - lr * update).astype(p.dtype)
