"""BART-style encoder-decoder with an audio branch fused into the encoder.

Layout of :class:`BartFusion`:

* text embedding plus a learned absolute position table,
* ``n_enc`` post-LN encoder layers; before each of the last ``fuse_last_k``
  layers the incoming state ``H`` is replaced by ``H + CMA(H, Z_m)``, where
  ``CMA`` is a single cross-modal attention block (queries from text,
  keys/values from audio) whose output projection starts at zero,
* a CNN + self-attention audio encoder that turns a log-mel spectrogram into
  ``Z_m`` (``L_m x d_m``),
* ``n_dec`` post-LN decoder layers and logits tied to the token embedding.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import (
    BatchNorm2d,
    Conv2d,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    Parameter,
    attention_bias,
)
from .tokenizer import BOS, EOS, PAD, UNK, ConfigError

FULL_CHANNELS = (128, 128, 256, 256, 256, 256, 256)
FULL_STRIDES = ((2, 2), (2, 2), (2, 2), (2, 1), (2, 1), (2, 1), (2, 1))


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``audio_strides`` pairs are ``(frequency, time)``.  ``d_cma`` is the width
    of the cross-modal attention block.  ``use_audio=False`` builds the plain
    text-only encoder-decoder with no audio parameters at all.
    """

    vocab_size: int = 8192
    d_model: int = 768
    n_enc: int = 6
    n_dec: int = 6
    n_heads: int = 12
    d_ffn: int = 3072
    max_positions: int = 2048
    max_target_positions: int = 512
    n_mels: int = 128
    audio_channels: tuple = FULL_CHANNELS
    audio_strides: tuple = FULL_STRIDES
    n_audio_tx: int = 2
    audio_heads: int = 4
    d_cma: int = 768
    cma_heads: int = 1
    fuse_last_k: int = 2
    use_audio: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.audio_channels = tuple(int(c) for c in self.audio_channels)
        self.audio_strides = tuple(tuple(int(v) for v in s) for s in self.audio_strides)
        self.validate()

    @property
    def d_audio(self) -> int:
        return self.audio_channels[-1]

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not 0 <= self.fuse_last_k <= self.n_enc:
            raise ConfigError(f"fuse_last_k {self.fuse_last_k} must lie in [0, n_enc={self.n_enc}]")
        if len(self.audio_channels) != len(self.audio_strides):
            raise ConfigError("audio channel and stride lists differ in length")
        if self.d_audio % self.audio_heads:
            raise ConfigError(f"audio width {self.d_audio} not divisible by {self.audio_heads} heads")
        if self.d_cma % self.cma_heads:
            raise ConfigError(f"cross-modal width {self.d_cma} not divisible by {self.cma_heads} heads")
        freq = self.n_mels
        for s_f, _ in self.audio_strides:
            freq = -(-freq // s_f)
        if freq != 1:
            raise ConfigError(f"frequency strides reduce {self.n_mels} mel bands to {freq}, not 1")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(
            vocab_size=512, d_model=64, n_enc=2, n_dec=2, n_heads=2, d_ffn=128,
            max_positions=128, max_target_positions=128,
            audio_channels=(8, 8, 16, 16, 16, 16, 16), n_audio_tx=1, audio_heads=2,
            d_cma=64, fuse_last_k=1,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def profile(cls, name: str, **overrides) -> "ModelConfig":
        if name == "full":
            return cls.full(**overrides)
        if name == "toy":
            return cls.toy(**overrides)
        raise ConfigError(f"unknown profile {name!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def audio_output_length(n_frames: int, strides: Sequence) -> int:
    """Time steps left after the stride stack (each stride rounds up)."""
    for _, s_t in strides:
        n_frames = -(-n_frames // s_t)
    return n_frames


class EncoderLayer(Module):
    """Post-LN block: ``LN(SA(H) W_a + H)`` then ``LN(FFN(.) + .)``."""

    def __init__(self, d: int, n_heads: int, d_ffn: int, rng, eps: float = 1e-5):
        self.attn = MultiHeadAttention(d, d, d, n_heads, rng)
        self.ln_attn = LayerNorm(d, eps)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.ln_ffn = LayerNorm(d, eps)

    def forward(self, h: Tensor, blocked: Optional[np.ndarray] = None) -> Tensor:
        h = self.ln_attn(self.attn(h, h, blocked) + h)
        return self.ln_ffn(self.ffn(h) + h)


class DecoderLayer(Module):
    def __init__(self, d: int, n_heads: int, d_ffn: int, rng, eps: float = 1e-5):
        self.self_attn = MultiHeadAttention(d, d, d, n_heads, rng)
        self.ln_self = LayerNorm(d, eps)
        self.cross_attn = MultiHeadAttention(d, d, d, n_heads, rng)
        self.ln_cross = LayerNorm(d, eps)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.ln_ffn = LayerNorm(d, eps)

    def forward(self, h: Tensor, memory: Tensor, self_blocked, memory_blocked) -> Tensor:
        h = self.ln_self(self.self_attn(h, h, self_blocked) + h)
        h = self.ln_cross(self.cross_attn(h, memory, memory_blocked) + h)
        return self.ln_ffn(self.ffn(h) + h)


class AudioBlock(Module):
    """Residual conv block ``BN(conv2(relu(conv1 H))) + BN(conv3 H)``."""

    def __init__(self, c_in: int, c_out: int, stride, rng, momentum: float, eps: float):
        self.conv1 = Conv2d(c_in, c_out, rng, stride)
        # convolutions feeding batch norm carry no bias: the normalisation removes it
        self.conv2 = Conv2d(c_out, c_out, rng, bias=False)
        self.bn2 = BatchNorm2d(c_out, momentum, eps)
        self.conv3 = Conv2d(c_in, c_out, rng, stride, bias=False)
        self.bn3 = BatchNorm2d(c_out, momentum, eps)

    def forward(self, h: Tensor) -> Tensor:
        main = self.bn2(self.conv2(ag.relu(self.conv1(h))))
        return main + self.bn3(self.conv3(h))


class AudioEncoder(Module):
    """Log-mel ``[B, n_mels, T]`` to ``Z_m`` ``[B, L_m, d_m]``."""

    def __init__(self, cfg: ModelConfig, rng):
        self.n_mels = cfg.n_mels
        self.strides = cfg.audio_strides
        blocks = []
        c_in = 1
        for c_out, stride in zip(cfg.audio_channels, cfg.audio_strides):
            blocks.append(AudioBlock(c_in, c_out, stride, rng, cfg.bn_momentum, cfg.bn_eps))
            c_in = c_out
        self.blocks = blocks
        d = cfg.d_audio
        self.layers = [EncoderLayer(d, cfg.audio_heads, 4 * d, rng, cfg.ln_eps) for _ in range(cfg.n_audio_tx)]

    def forward(self, mel, frame_lengths: Optional[np.ndarray] = None) -> tuple:
        """Return ``(Z_m, key_mask)``; ``key_mask`` is ``None`` when all frames are real."""
        # match the parameter precision so fusion never promotes the text stream
        dtype = self.blocks[0].conv1.kernel.dtype
        if not isinstance(mel, Tensor) or mel.dtype != dtype:
            mel = Tensor(np.asarray(getattr(mel, "data", mel), dtype=dtype))
        if mel.ndim == 2:
            mel = mel.reshape(1, *mel.shape)
        if mel.ndim != 3 or mel.shape[1] != self.n_mels:
            raise ag.DimensionError(f"expected [B, {self.n_mels}, T] log-mel input, got {mel.shape}")
        b, f, t = mel.shape
        h = mel.reshape(b, 1, f, t)
        for block in self.blocks:
            h = block(h)
        _, c, f_out, l_m = h.shape
        z = h.reshape(b, c, l_m).transpose(0, 2, 1)
        key_mask = None
        if frame_lengths is not None:
            lengths = np.array([audio_output_length(int(n), self.strides) for n in frame_lengths])
            if (lengths < l_m).any():
                key_mask = np.arange(l_m)[None, :] < lengths[:, None]
        blocked = attention_bias(key_mask)
        for layer in self.layers:
            z = layer(z, blocked)
        return z, key_mask


class BartFusion(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        std = cfg.init_std
        self.tok_embed = Parameter((rng.standard_normal((cfg.vocab_size, d)) * std).astype(np.float32))
        self.enc_pos = Parameter((rng.standard_normal((cfg.max_positions, d)) * std).astype(np.float32))
        self.dec_pos = Parameter((rng.standard_normal((cfg.max_target_positions, d)) * std).astype(np.float32))
        self.encoder = [EncoderLayer(d, cfg.n_heads, cfg.d_ffn, rng, cfg.ln_eps) for _ in range(cfg.n_enc)]
        self.decoder = [DecoderLayer(d, cfg.n_heads, cfg.d_ffn, rng, cfg.ln_eps) for _ in range(cfg.n_dec)]
        if cfg.use_audio:
            self.audio = AudioEncoder(cfg, rng)
            self.cma = MultiHeadAttention(d, cfg.d_audio, cfg.d_cma, cfg.cma_heads, rng, zero_out=True)
        else:
            self.audio = None
            self.cma = None

    # -- text side ---------------------------------------------------------

    def embed_tokens(self, ids: np.ndarray, positions: Optional[Parameter] = None) -> Tensor:
        """``H0 = X_t + E_pe[:L]`` for an id matrix ``[B, L]``."""
        ids = np.asarray(ids)
        table = self.enc_pos if positions is None else positions
        length = ids.shape[1]
        if length > table.shape[0]:
            raise IndexError(f"sequence of {length} tokens exceeds {table.shape[0]} positions")
        pos = ag.reshape(ag.embedding(np.arange(length), table), (1, length, table.shape[1]))
        return ag.embedding(ids, self.tok_embed) + pos

    def encode_audio(self, mel, frame_lengths=None) -> tuple:
        if self.audio is None:
            raise ConfigError("this model was built without an audio encoder")
        return self.audio(mel, frame_lengths)

    def cross_modal(self, h: Tensor, z: Tensor, audio_mask: Optional[np.ndarray] = None) -> Tensor:
        """Audio-to-text attention projected back to the text width."""
        return self.cma(h, z, attention_bias(audio_mask))

    def encode(self, ids, mask, mel=None, frame_lengths=None, return_states: bool = False):
        """Run the (optionally fused) encoder.

        Returns the final ``[B, L_t, d]`` state, or the list of every layer's
        output when ``return_states`` is set.  Without ``mel`` every layer is
        a plain text layer.
        """
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("every sequence needs at least one unmasked token")
        h = self.embed_tokens(ids)
        blocked = attention_bias(mask)
        z = audio_mask = None
        if mel is not None:
            z, audio_mask = self.encode_audio(mel, frame_lengths)
        first_fused = self.cfg.n_enc - self.cfg.fuse_last_k
        states = []
        for i, layer in enumerate(self.encoder):
            if z is not None and i >= first_fused:
                h = h + self.cross_modal(h, z, audio_mask)
            h = layer(h, blocked)
            states.append(h)
        return states if return_states else h

    def decode(self, tgt_ids, tgt_mask, memory: Tensor, memory_mask) -> Tensor:
        """Logits ``[B, L_tgt, V]`` for decoder inputs ``tgt_ids``."""
        tgt_ids = np.asarray(tgt_ids)
        if tgt_ids.shape[1] == 0:
            raise ValueError("empty target sequence")
        h = self.embed_tokens(tgt_ids, self.dec_pos)
        self_blocked = attention_bias(np.asarray(tgt_mask, dtype=bool), causal_len=tgt_ids.shape[1])
        memory_blocked = attention_bias(np.asarray(memory_mask, dtype=bool))
        for layer in self.decoder:
            h = layer(h, memory, self_blocked, memory_blocked)
        return h @ ag.transpose(self.tok_embed, (1, 0))

    def forward(self, src_ids, src_mask, tgt_ids, tgt_mask, mel=None, frame_lengths=None) -> Tensor:
        memory = self.encode(src_ids, src_mask, mel, frame_lengths)
        return self.decode(tgt_ids, tgt_mask, memory, src_mask)

    # -- decoding ----------------------------------------------------------

    def _step_logprobs(self, prefix: np.ndarray, memory: Tensor, src_mask: np.ndarray) -> np.ndarray:
        logits = self.decode(prefix, np.ones(prefix.shape, dtype=bool), memory, src_mask).data[:, -1, :]
        z = logits.astype(np.float64)
        z[:, [PAD, BOS, UNK]] = -np.inf
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def generate(self, src_ids, src_mask, mel=None, frame_lengths=None, max_new: int = 128,
                 beam: int = 1, length_penalty: float = 0.7) -> list:
        """Decode from ``bos`` until ``eos`` or ``max_new`` tokens per row.

        ``beam == 1`` is greedy (batched); larger beams run per example and
        rank hypotheses by ``sum log p / length ** length_penalty``.  Returned
        rows exclude ``bos`` and ``eos``.
        """
        if max_new <= 0:
            raise ConfigError("max_new must be positive")
        if beam < 1:
            raise ConfigError("beam width must be at least 1")
        max_new = min(max_new, self.cfg.max_target_positions - 1)
        src_ids = np.asarray(src_ids)
        src_mask = np.asarray(src_mask, dtype=bool)
        was_training = self.training
        self.eval()
        try:
            with ag.no_grad():
                memory = self.encode(src_ids, src_mask, mel, frame_lengths)
                if beam == 1:
                    return self._greedy(memory, src_mask, max_new)
                out = []
                for i in range(src_ids.shape[0]):
                    mem_i = Tensor(memory.data[i : i + 1])
                    out.append(self._beam(mem_i, src_mask[i : i + 1], max_new, beam, length_penalty))
                return out
        finally:
            self.train(was_training)

    def _greedy(self, memory: Tensor, src_mask: np.ndarray, max_new: int) -> list:
        b = memory.shape[0]
        prefix = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_new):
            nxt = self._step_logprobs(prefix, memory, src_mask).argmax(axis=1)
            nxt = np.where(done, PAD, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        rows = []
        for row in prefix[:, 1:]:
            toks = []
            for t in row:
                if t in (EOS, PAD):
                    break
                toks.append(int(t))
            rows.append(toks)
        return rows

    def _beam(self, memory: Tensor, src_mask: np.ndarray, max_new: int, k: int, alpha: float) -> list:
        def normalised(c):
            return c[1] / (len(c[0]) - 1) ** alpha

        beams = [((BOS,), 0.0)]
        finished = []
        for _ in range(max_new):
            prefix = np.array([b[0] for b in beams], dtype=np.int64)
            mem = Tensor(np.repeat(memory.data, len(beams), axis=0))
            logp = self._step_logprobs(prefix, mem, np.repeat(src_mask, len(beams), axis=0))
            candidates = []
            for (seq, score), row in zip(beams, logp):
                top = np.argsort(-row, kind="stable")[:k]
                candidates.extend((seq + (int(t),), score + float(row[t])) for t in top)
            candidates.sort(key=lambda c: -c[1])
            beams = []
            for seq, score in candidates:
                if seq[-1] == EOS:
                    finished.append((seq, score))
                else:
                    beams.append((seq, score))
                if len(beams) == k:
                    break
            finished = sorted(finished, key=normalised, reverse=True)[:k]
            if not beams:
                break
            if len(finished) >= k:
                # log-probs are <= 0, so a live beam's normalised score is at
                # best its current sum spread over the longest allowed length
                ceiling = max(score / max_new ** alpha for _, score in beams)
                if normalised(finished[-1]) >= ceiling:
                    break
        best = max(finished or beams, key=normalised)
        return [t for t in best[0][1:] if t != EOS]
