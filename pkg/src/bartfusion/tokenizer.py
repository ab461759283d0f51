"""Byte-level BPE tokenizer trained on the working corpus."""

from __future__ import annotations

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)
N_BYTES = 256
HEADER = "#bartfusion-bpe v1"

# every character falls in exactly one alternative, so chunks tile the text
_CHUNK = re.compile(r"\s?\w+|\s?[^\w\s]+|\s+")


class ConfigError(ValueError):
    """Invalid configuration value."""


def pretokenize(text: str) -> list:
    return [m.group().encode("utf-8") for m in _CHUNK.finditer(text)]


@dataclass
class TokenBatch:
    """Padded id matrix and its mask (``True`` marks a real token)."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape or self.ids.ndim != 2:
            raise ValueError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal 2-d shapes")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


class Vocabulary:
    """Token table (special tokens, 256 bytes, then merges in rank order)."""

    def __init__(self, merges: Sequence[tuple] = ()):
        self.tokens: list = [s.encode() for s in SPECIALS] + [bytes([b]) for b in range(N_BYTES)]
        self.index: dict = {tok: i for i, tok in enumerate(self.tokens) if i >= len(SPECIALS)}
        self.merges: list = []
        self.ranks: dict = {}
        self.merge_ids: dict = {}
        for left, right in merges:
            self.add_merge(left, right)
        self._cache: dict = {}

    def add_merge(self, left: int, right: int) -> int:
        """Record a merge; a byte string already in the table keeps its id."""
        joined = self.tokens[left] + self.tokens[right]
        new_id = self.index.get(joined)
        if new_id is None:
            new_id = len(self.tokens)
            self.tokens.append(joined)
            self.index[joined] = new_id
        self.ranks[(left, right)] = len(self.merges)
        self.merge_ids[(left, right)] = new_id
        self.merges.append((left, right))
        return new_id

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return PAD

    @property
    def bos_id(self) -> int:
        return BOS

    @property
    def eos_id(self) -> int:
        return EOS

    @property
    def unk_id(self) -> int:
        return UNK

    def tokenize_chunk(self, chunk: bytes) -> list:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        ids = [len(SPECIALS) + b for b in chunk]
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                rank = self.ranks.get(pair)
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, pair)
            if best is None:
                break
            pair = best[1]
            merged = self.merge_ids[pair]
            out, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        if len(self._cache) < 100_000:
            self._cache[chunk] = ids
        return ids

    def tokenize(self, text: str) -> list:
        ids = []
        for chunk in pretokenize(text):
            ids.extend(self.tokenize_chunk(chunk))
        return ids

    def save(self, path) -> None:
        lines = [HEADER, f"#tokens {len(self.tokens)}"]
        for i, tok in enumerate(self.tokens):
            lines.append(SPECIALS[i] if i < len(SPECIALS) else tok.hex())
        lines.append(f"#merges {len(self.merges)}")
        lines.extend(f"{a} {b}" for a, b in self.merges)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = Path(path).read_text(encoding="utf-8").splitlines()
        if not rows or rows[0] != HEADER:
            raise ValueError(f"{path}: unsupported vocabulary header")
        n_tokens = int(rows[1].split()[1])
        merge_header = rows[2 + n_tokens]
        if not merge_header.startswith("#merges "):
            raise ValueError(f"{path}: merges section missing")
        merges = [tuple(int(v) for v in row.split()) for row in rows[3 + n_tokens :] if row]
        vocab = cls(merges)
        stored = rows[2 : 2 + n_tokens]
        if len(stored) != len(vocab.tokens):
            raise ValueError(f"{path}: token table does not match its merges")
        for i, row in enumerate(stored[len(SPECIALS) :], start=len(SPECIALS)):
            if bytes.fromhex(row) != vocab.tokens[i]:
                raise ValueError(f"{path}: token {i} does not match its merge")
        return vocab


def build_vocab(corpus: Iterable[str], cap: int = 8192) -> Vocabulary:
    """Learn byte-pair merges greedily until the table holds ``cap`` entries.

    The most frequent adjacent pair is merged first; ties go to the
    lexicographically smallest ``(left bytes, right bytes)``.  Merging stops
    early once no pair occurs at least twice.
    """
    if cap < len(SPECIALS) + N_BYTES:
        raise ConfigError(f"vocabulary cap {cap} is below {len(SPECIALS) + N_BYTES}")
    counts: Counter = Counter()
    seen_any = False
    for text in corpus:
        seen_any = True
        counts.update(pretokenize(text))
    if not seen_any:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    vocab = Vocabulary()
    words = [[len(SPECIALS) + b for b in chunk] for chunk in counts]
    freqs = list(counts.values())
    pair_counts: defaultdict = defaultdict(int)
    where: defaultdict = defaultdict(set)
    for w, (ids, f) in enumerate(zip(words, freqs)):
        for pair in zip(ids, ids[1:]):
            pair_counts[pair] += f
            where[pair].add(w)

    def entry(pair):
        return (-pair_counts[pair], vocab.tokens[pair[0]], vocab.tokens[pair[1]], pair)

    heap = [entry(p) for p in pair_counts]
    heapq.heapify(heap)
    while len(vocab) < cap and heap:
        neg, _, _, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale entry
        if -neg < 2:
            break
        merged = vocab.add_merge(*pair)
        touched = set()
        for w in sorted(where.pop(pair, ())):
            ids, f = words[w], freqs[w]
            for p in zip(ids, ids[1:]):
                pair_counts[p] -= f
                touched.add(p)
            out, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            words[w] = out
            for p in zip(out, out[1:]):
                pair_counts[p] += f
                where[p].add(w)
                touched.add(p)
        pair_counts.pop(pair, None)
        for p in touched:
            if p == pair:
                continue
            if pair_counts.get(p, 0) > 0:
                heapq.heappush(heap, entry(p))
            else:
                pair_counts.pop(p, None)
                where.pop(p, None)
    return vocab


def encode(text: str, vocab: Vocabulary, max_len: int) -> tuple:
    """``[bos] + tokens + [eos]`` cut to ``max_len`` (eos kept) and padded.

    Returns ``(ids, mask)`` as int64 / bool arrays of length ``max_len``.
    """
    if max_len < 2:
        raise ConfigError("max_len must leave room for bos and eos")
    body = vocab.tokenize(text)[: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = BOS
    ids[1 : 1 + len(body)] = body
    ids[1 + len(body)] = EOS
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(body) + 2] = True
    return ids, mask


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Concatenate the bytes of non-special ids and decode them as UTF-8."""
    out = bytearray()
    n = len(vocab)
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise ValueError(f"unknown token id {i}")
        if i >= len(SPECIALS):
            out += vocab.tokens[i]
    return out.decode("utf-8", errors="replace")


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int, pad_to_longest: bool = True) -> TokenBatch:
    rows = [encode(t, vocab, max_len) for t in texts]
    ids = np.stack([r[0] for r in rows]) if rows else np.zeros((0, max_len), np.int64)
    mask = np.stack([r[1] for r in rows]) if rows else np.zeros((0, max_len), bool)
    if pad_to_longest and len(rows):
        width = int(mask.sum(axis=1).max())
        ids, mask = ids[:, :width], mask[:, :width]
    return TokenBatch(ids, mask)


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns merges, ``transform`` yields a TokenBatch.

    Parameters
    ----------
    vocab_size : int
        Upper bound on the table size, specials and byte tokens included.
    max_len : int
        Rows are truncated (keeping ``eos``) to this many ids.
    pad_to_longest : bool
        Pad batches only to their longest row rather than to ``max_len``.
    """

    def __init__(self, vocab_size: int = 8192, max_len: int = 2048, pad_to_longest: bool = True):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.pad_to_longest = pad_to_longest

    def fit(self, X, y=None):
        texts = list(X)
        if y is not None:
            texts += list(y)
        self.vocab_ = build_vocab(texts, self.vocab_size)
        return self

    def _vocab(self) -> Vocabulary:
        vocab: Optional[Vocabulary] = getattr(self, "vocab_", None)
        if vocab is None:
            raise NotFittedError("BPETokenizer is not fitted yet")
        return vocab

    def transform(self, X) -> TokenBatch:
        return encode_batch(list(X), self._vocab(), self.max_len, self.pad_to_longest)

    def inverse_transform(self, ids) -> list:
        vocab = self._vocab()
        return [decode(row, vocab) for row in np.atleast_2d(ids)]
