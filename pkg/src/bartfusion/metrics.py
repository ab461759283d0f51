"""ROUGE-1/2/L, a WordNet-free METEOR and mean reciprocal rank."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

_WORD = re.compile(r"[^\W_]+")
_STEMMER = PorterStemmer()


def tokenize(text: str) -> list:
    """Lowercase and split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


def _prf(overlap: int, n_cand: int, n_ref: int) -> tuple:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return p, r, 2 * p * r / (p + r)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int = 1) -> tuple:
    """``(precision, recall, F1)`` of clipped n-gram overlap."""
    cand, ref = ngrams(tokenize(candidate), n), ngrams(tokenize(reference), n)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> tuple:
    cand, ref = tokenize(candidate), tokenize(reference)
    return _prf(lcs_length(cand, ref), len(cand), len(ref))


def _align(cand: list, ref: list, used_c: set, used_r: set, key) -> list:
    """Greedy one-to-one matching that prefers extending the current chunk."""
    pairs = []
    last_r = None
    for i, word in enumerate(cand):
        if i in used_c:
            last_r = None
            continue
        options = [j for j, other in enumerate(ref) if j not in used_r and key(other) == key(word)]
        if not options:
            last_r = None
            continue
        j = last_r + 1 if last_r is not None and last_r + 1 in options else options[0]
        pairs.append((i, j))
        used_c.add(i)
        used_r.add(j)
        last_r = j
    return pairs


def count_chunks(pairs: Sequence[tuple]) -> int:
    """Runs of matches adjacent in both candidate and reference order."""
    chunks = 0
    prev = None
    for i, j in sorted(pairs):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidate: str, reference: str, alpha: float = 0.9, gamma: float = 0.5,
                beta: float = 3.0) -> float:
    """METEOR with exact then Porter-stem unigram matching.

    ``F_mean = P R / (alpha P + (1 - alpha) R)`` (= ``10PR / (R + 9P)`` at
    the defaults), penalty ``gamma * (chunks / matches) ** beta``.
    """
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    used_c: set = set()
    used_r: set = set()
    pairs = _align(cand, ref, used_c, used_r, lambda w: w)
    pairs += _align(cand, ref, used_c, used_r, _STEMMER.stem)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    p, r = matches / len(cand), matches / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(pairs) / matches) ** beta
    return f_mean * (1.0 - penalty)


def mrr(ranks: Sequence[int], n: Optional[int] = None) -> float:
    """Mean of ``1 / k_i`` over 1-based ranks, each at most ``n`` when given."""
    ranks = [int(k) for k in ranks]
    if not ranks:
        raise ValueError("mrr of an empty rank list")
    for k in ranks:
        if k < 1 or (n is not None and k > n):
            raise ValueError(f"rank {k} outside [1, {n}]")
    return float(np.mean([1.0 / k for k in ranks]))


@dataclass
class RankResult:
    query_id: str
    rank: int

    @property
    def score(self) -> float:
        return 1.0 / self.rank


@dataclass
class MetricReport:
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float
    pairs: list = field(default_factory=list)
    similarity: Optional[float] = None

    COLUMNS = (("R-1", "rouge1"), ("R-2", "rouge2"), ("R-L", "rougeL"), ("METEOR", "meteor"))

    def table(self) -> str:
        cols = list(self.COLUMNS)
        if self.similarity is not None:
            cols.append(("EmbSim", "similarity"))
        head = " | ".join(f"{name:>7}" for name, _ in cols)
        row = " | ".join(f"{100 * getattr(self, attr):7.1f}" for _, attr in cols)
        return f"{head}\n{row}"

    def records(self) -> list:
        """Line-delimited JSON: one per pair, then the aggregate."""
        lines = [json.dumps(p, sort_keys=True) for p in self.pairs]
        summary = {k: v for k, v in asdict(self).items() if k != "pairs" and v is not None}
        lines.append(json.dumps({"aggregate": summary}, sort_keys=True))
        return lines


def score_pairs(candidates: Sequence[str], references: Sequence[str], embedder=None) -> MetricReport:
    """Corpus-level means of every metric over aligned candidate/reference lists.

    ``embedder`` (any object with ``transform(texts) -> unit vectors``)
    adds a mean cosine similarity column.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    pairs = []
    for i, (c, r) in enumerate(zip(candidates, references)):
        pairs.append({
            "index": i,
            "rouge1": rouge_n(c, r, 1)[2],
            "rouge2": rouge_n(c, r, 2)[2],
            "rougeL": rouge_l(c, r)[2],
            "meteor": meteor_lite(c, r),
        })
    similarity = None
    if embedder is not None and pairs:
        a = np.asarray(embedder.transform(list(candidates)))
        b = np.asarray(embedder.transform(list(references)))
        sims = (a * b).sum(axis=1)
        for p, s in zip(pairs, sims):
            p["similarity"] = float(s)
        similarity = float(sims.mean())

    def avg(key):
        return float(np.mean([p[key] for p in pairs])) if pairs else 0.0

    return MetricReport(avg("rouge1"), avg("rouge2"), avg("rougeL"), avg("meteor"), pairs, similarity)
