"""Parameter containers and the layer building blocks used by the model."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


class Module:
    """Base class: discovers parameters, buffers and children from attributes.

    Parameter names are dotted attribute paths (``encoder.3.attn.w_q``), which
    is what checkpoints key on.  Lists of modules are walked with their index
    as the path component.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key in getattr(self, "_buffer_names", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (m, key) for m, key, name in self._buffer_owners()}
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(np.shape(value)):
                    raise ag.DimensionError(f"{name}: checkpoint shape {np.shape(value)} vs {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in buffers:
                m, key = buffers[name]
                setattr(m, key, np.array(value, dtype=getattr(m, key).dtype))

    def _buffer_owners(self, prefix: str = "") -> Iterator[tuple]:
        for key in getattr(self, "_buffer_names", ()):
            yield self, key, prefix + key
        for key, child in self._children():
            yield from child._buffer_owners(prefix + key + ".")

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m, key, _ in self._buffer_owners():
            setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02, zero: bool = False):
        w = np.zeros((d_in, d_out), np.float32) if zero else _normal(rng, (d_in, d_out), std)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d, np.float32))
        self.beta = Parameter(np.zeros(d, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Conv2d(Module):
    """SAME-padded convolution with a ``k x k`` kernel."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride=(1, 1),
                 kernel_size: int = 3, bias: bool = True):
        fan_in = c_in * kernel_size * kernel_size
        # He-normal keeps activations from vanishing through the 7-block stack
        self.kernel = Parameter(_normal(rng, (c_out, c_in, kernel_size, kernel_size), np.sqrt(2.0 / fan_in)))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None
        self.stride = tuple(stride)

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.kernel, self.bias, self.stride)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter(_normal(rng, (n, d), std))

    def forward(self, ids) -> Tensor:
        return ag.embedding(ids, self.weight)


def attention_bias(key_mask: Optional[np.ndarray], causal_len: Optional[int] = None) -> Optional[np.ndarray]:
    """Boolean ``True = blocked`` mask broadcastable to ``[B, H, Lq, Lk]``."""
    blocked = None
    if key_mask is not None:
        blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal_len is not None:
        causal = np.triu(np.ones((causal_len, causal_len), dtype=bool), k=1)[None, None]
        blocked = causal if blocked is None else (blocked | causal)
    return blocked


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value widths.

    Queries are projected from ``d_query`` features, keys and values from
    ``d_kv`` features, both into a ``d_attn``-wide space split across
    ``n_heads``; the result is mapped back to ``d_query`` by ``w_out``.
    """

    def __init__(self, d_query: int, d_kv: int, d_attn: int, n_heads: int, rng: np.random.Generator,
                 zero_out: bool = False):
        if d_attn % n_heads:
            raise ValueError(f"attention width {d_attn} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_attn // n_heads
        self.w_q = Linear(d_query, d_attn, rng)
        # a key bias only shifts every score in a row equally, which softmax ignores
        self.w_k = Linear(d_kv, d_attn, rng, bias=False)
        self.w_v = Linear(d_kv, d_attn, rng)
        self.w_out = Linear(d_attn, d_query, rng, zero=zero_out)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return x.reshape(b, length, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def attend(self, query: Tensor, kv: Tensor, blocked: Optional[np.ndarray] = None) -> Tensor:
        """Attention output before the output projection, ``[B, Lq, d_attn]``."""
        if kv.shape[1] == 0:
            raise ValueError("attention over an empty key sequence")
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(kv))
        v = self._split(self.w_v(kv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        if blocked is not None:
            scores = ag.masked_fill(scores, blocked, -np.inf)
        weights = ag.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(0, 2, 1, 3)
        b, lq = ctx.shape[0], ctx.shape[1]
        return ctx.reshape(b, lq, self.n_heads * self.d_head)

    def forward(self, query: Tensor, kv: Tensor, blocked: Optional[np.ndarray] = None) -> Tensor:
        return self.w_out(self.attend(query, kv, blocked))


class FeedForward(Module):
    def __init__(self, d: int, d_ffn: int, rng: np.random.Generator, kind: str = "gelu"):
        self.fc1 = Linear(d, d_ffn, rng)
        self.fc2 = Linear(d_ffn, d, rng)
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.activation(self.fc1(x), self.kind))
