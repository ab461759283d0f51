"""Text-to-song retrieval over generated interpretations, scored with MRR."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_tensors, save_tensors
from .metrics import mrr, tokenize
from .tokenizer import encode_batch

logger = logging.getLogger(__name__)

N_BUCKETS = 2 ** 14
MIN_QUERY_CHARS = 20
INDEX_MANIFEST = "index.json"
_SENTENCE_END = re.compile(r"[.!?]")


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalise a zero embedding")
    return m / norms


def _bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


class TfidfEmbedder:
    """Hashed TF-IDF vectors: ``1 + ln(tf)`` weights, smoothed corpus IDF, unit L2 norm.

    Before ``fit`` every IDF weight is 1.  Weights are held at float32, the
    precision of the saved index, so a reloaded embedder reproduces queries
    bit for bit.
    """

    name = "tfidf"

    def __init__(self, n_buckets: int = N_BUCKETS):
        self.n_buckets = n_buckets
        self.idf = np.ones(n_buckets, dtype=np.float32)

    @property
    def dim(self) -> int:
        return self.n_buckets

    def _counts(self, text: str) -> dict:
        if not text or not text.strip():
            raise ValueError("cannot embed an empty text")
        counts: dict = {}
        for tok in tokenize(text):
            b = _bucket(tok, self.n_buckets)
            counts[b] = counts.get(b, 0) + 1
        if not counts:
            raise ValueError(f"no word tokens in {text[:40]!r}")
        return counts

    def fit(self, texts: Sequence[str]) -> "TfidfEmbedder":
        df = np.zeros(self.n_buckets)
        for text in texts:
            df[list(self._counts(text))] += 1
        self.idf = (np.log((1.0 + len(texts)) / (1.0 + df)) + 1.0).astype(np.float32)
        return self

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.n_buckets))
        for i, text in enumerate(texts):
            for b, c in self._counts(text).items():
                out[i, b] = (1.0 + np.log(c)) * float(self.idf[b])
        return _unit_rows(out)

    def state(self) -> dict:
        return {"idf": self.idf}

    def load_state(self, state: dict) -> None:
        self.idf = np.asarray(state["idf"], dtype=np.float32)


class EncoderEmbedder:
    """Mean of the final text-encoder states over non-pad positions (audio not used)."""

    name = "encoder"

    def __init__(self, model, vocab, max_len: int = 512):
        self.model = model
        self.vocab = vocab
        self.max_len = max_len

    @property
    def dim(self) -> int:
        return self.model.cfg.d_model

    def fit(self, texts: Sequence[str]) -> "EncoderEmbedder":
        return self

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            if not t or not t.strip():
                raise ValueError("cannot embed an empty text")
        batch = encode_batch(list(texts), self.vocab, self.max_len)
        was_training = self.model.training
        self.model.eval()
        try:
            with ag.no_grad():
                h = self.model.encode(batch.ids, batch.mask).data.astype(np.float64)
        finally:
            self.model.train(was_training)
        m = batch.mask[:, :, None]
        return _unit_rows((h * m).sum(axis=1) / m.sum(axis=1))

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


def embed_text(text: str, embedder) -> np.ndarray:
    return embedder.transform([text])[0]


@dataclass
class EmbeddingIndex:
    """Unit vectors for a fixed set of songs, rows aligned with ``song_ids``."""

    song_ids: list
    vectors: np.ndarray
    embedder_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.song_ids):
            raise ValueError(f"{len(self.song_ids)} ids vs vectors of shape {self.vectors.shape}")
        if len(set(self.song_ids)) != len(self.song_ids):
            raise ValueError("duplicate song ids in index")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.song_ids)

    def save(self, path, embedder_state: Optional[dict] = None) -> Path:
        tensors = {"vectors": self.vectors}
        for k, v in (embedder_state or {}).items():
            tensors[f"embedder.{k}"] = v
        path = save_tensors(path, tensors, {"kind": "embedding-index"})
        manifest = {"embedder": self.embedder_id, "dim": self.dim, "song_ids": list(self.song_ids)}
        (path / INDEX_MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> tuple:
        """Return ``(index, embedder_state)``."""
        manifest = json.loads((Path(path) / INDEX_MANIFEST).read_text(encoding="utf-8"))
        tensors, _ = load_tensors(path)
        state = {k[len("embedder."):]: v for k, v in tensors.items() if k.startswith("embedder.")}
        index = cls(manifest["song_ids"], tensors["vectors"], manifest["embedder"])
        if index.dim != manifest["dim"]:
            raise ValueError(f"{path}: manifest dim {manifest['dim']} but vectors have {index.dim}")
        return index, state


def index_texts(song_ids: Sequence[str], texts: Sequence[str], embedder, fit: bool = True) -> EmbeddingIndex:
    """Embed one text per song; the embedder is fitted on these texts first when ``fit``."""
    if fit:
        embedder.fit(list(texts))
    return EmbeddingIndex(list(song_ids), embedder.transform(list(texts)), embedder.name)


def build_index(songs: Sequence[tuple], generate, embedder) -> tuple:
    """Generate, embed and store one interpretation per song.

    ``songs`` holds ``(song_id, payload)`` pairs and ``generate(payload)``
    returns a string.  Songs whose generation raises or comes back empty are
    skipped with a warning.  Returns ``(index, generated texts by song id)``.
    """
    ids, texts = [], []
    for song_id, payload in songs:
        try:
            text = generate(payload)
            if not tokenize(text):
                raise ValueError("empty generation")
        except Exception as exc:  # noqa: BLE001 - any failure skips just this song
            warnings.warn(f"song {song_id}: generation failed ({exc}); skipped", stacklevel=2)
            continue
        ids.append(song_id)
        texts.append(text)
    if not ids:
        raise ValueError("no song produced a usable interpretation")
    return index_texts(ids, texts, embedder), dict(zip(ids, texts))


def rank_by_similarity(query_vec: np.ndarray, index: EmbeddingIndex) -> list:
    sims = index.vectors.astype(np.float64) @ np.asarray(query_vec, dtype=np.float64)
    ids = index.song_ids
    return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))]


def query_rank(query: str, index: EmbeddingIndex, embedder) -> list:
    """All song ids by descending cosine similarity; equal scores sort by id."""
    if len(index) == 0:
        raise ValueError("empty index")
    return rank_by_similarity(embed_text(query, embedder), index)


@dataclass(frozen=True)
class Query:
    text: str
    song_id: str


def split_sentences(text: str, min_chars: int = MIN_QUERY_CHARS) -> list:
    parts = (s.strip() for s in _SENTENCE_END.split(text))
    return [s for s in parts if len(s) >= min_chars]


def make_queries(references: Sequence[tuple], seed: int = 0, min_chars: int = MIN_QUERY_CHARS) -> list:
    """One uniformly drawn sentence per ``(song_id, reference)``; songs with none are skipped."""
    rng = np.random.default_rng(seed)
    queries = []
    for song_id, text in references:
        sentences = split_sentences(text, min_chars)
        if not sentences:
            warnings.warn(f"song {song_id}: no sentence of {min_chars}+ characters; skipped", stacklevel=2)
            continue
        queries.append(Query(sentences[int(rng.integers(len(sentences)))], song_id))
    return queries


def evaluate_retrieval(queries: Sequence[Query], index: EmbeddingIndex, embedder) -> tuple:
    """Return ``(mrr, ranks)``, ranks being the 1-based position of each true song."""
    known = set(index.song_ids)
    missing = sorted({q.song_id for q in queries} - known)
    if missing:
        raise ValueError(f"query songs missing from the index: {missing[:5]}")
    if not queries:
        raise ValueError("no queries")
    vecs = embedder.transform([q.text for q in queries])
    ranks = [rank_by_similarity(v, index).index(q.song_id) + 1 for v, q in zip(vecs, queries)]
    return mrr(ranks, len(index)), ranks


def random_embedding_mrr(n: int, trials: int = 1000, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Per-trial MRR when songs and queries get independent random unit vectors."""
    rng = np.random.default_rng(seed)
    out = np.empty(trials)
    for t in range(trials):
        db = _unit_rows(rng.standard_normal((n, dim)))
        q = _unit_rows(rng.standard_normal((n, dim)))
        sims = q @ db.T
        truth = sims[np.arange(n), np.arange(n)]
        ranks = 1 + (sims > truth[:, None]).sum(axis=1)
        out[t] = np.mean(1.0 / ranks)
    return out


def harmonic_baseline(n: int) -> float:
    """Expected MRR of a uniformly random ranking of ``n`` items, ``H_n / n``."""
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)
