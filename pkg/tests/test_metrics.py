import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from nltk.stem.porter import PorterStemmer

from bartfusion.metrics import (MetricReport, RankResult, count_chunks, lcs_length, meteor_lite, mrr, rouge_l,
                                rouge_n, score_pairs, tokenize)

WORDS = "a b c d e f the cat".split()


def brute_overlap(cand, ref, n):
    pool = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    hits = 0
    for i in range(len(cand) - n + 1):
        g = tuple(cand[i : i + n])
        if g in pool:
            pool.remove(g)
            hits += 1
    return hits


def brute_lcs(a, b):
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        if any(is_subseq(c, b) for c in itertools.combinations(a, k)):
            return k
    return 0


def prf(overlap, nc, nr):
    if overlap == 0:
        return 0.0, 0.0, 0.0
    p, r = overlap / nc, overlap / nr
    return p, r, 2 * p * r / (p + r)


@pytest.mark.parametrize("n", [1, 2])
def test_rouge_n_matches_brute_force(n):
    rng = np.random.default_rng(7)
    for _ in range(200):
        cand = list(rng.choice(WORDS, rng.integers(0, 12)))
        ref = list(rng.choice(WORDS, rng.integers(0, 12)))
        nc, nr = max(len(cand) - n + 1, 0), max(len(ref) - n + 1, 0)
        expected = prf(brute_overlap(cand, ref, n), nc, nr)
        assert rouge_n(" ".join(cand), " ".join(ref), n) == expected


def test_lcs_matches_exhaustive_search():
    rng = np.random.default_rng(3)
    for _ in range(300):
        a = list(rng.choice(WORDS[:4], rng.integers(0, 9)))
        b = list(rng.choice(WORDS[:4], rng.integers(0, 9)))
        assert lcs_length(a, b) == brute_lcs(a, b)
        assert rouge_l(" ".join(a), " ".join(b)) == prf(brute_lcs(a, b), len(a), len(b))


def test_hand_examples():
    for p in rouge_n("the cat sat", "the cat ran", 1):
        assert p == pytest.approx(2 / 3, abs=1e-12)
    assert rouge_l("the cat sat", "the cat ran")[2] == pytest.approx(2 / 3, abs=1e-12)
    assert rouge_n("a b c", "a b c", 2)[2] == 1.0
    assert rouge_n("a b", "c d", 1) == (0.0, 0.0, 0.0)
    assert rouge_l("", "a b") == (0.0, 0.0, 0.0)


def test_tokenizer_lowercases_and_splits():
    assert tokenize("It's the END_of, 2024!") == ["it", "s", "the", "end", "of", "2024"]


def test_meteor_identical_pair():
    assert meteor_lite("the cat", "the cat") == pytest.approx(0.9375, abs=1e-12)


def test_meteor_no_overlap():
    assert meteor_lite("dog", "cat") == 0.0
    assert meteor_lite("", "cat") == 0.0


def test_meteor_stem_match():
    assert PorterStemmer().stem("running") == PorterStemmer().stem("run")
    assert meteor_lite("running fast", "run fast") == pytest.approx(0.9375, abs=1e-12)


def test_meteor_exact_before_stem():
    # both words match exactly but crosswise: two chunks of one match each
    assert meteor_lite("run runs", "runs run") == pytest.approx(0.5, abs=1e-12)


def test_meteor_formula_on_partial_match():
    # matches 2 of 3 candidate words, 2 of 4 reference words, one chunk
    p, r = 2 / 3, 2 / 4
    expected = 10 * p * r / (r + 9 * p) * (1 - 0.5 * (1 / 2) ** 3)
    assert meteor_lite("the cat zz", "the cat sat down") == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.permutations(list("abcdefgh")))
def test_meteor_order_enters_only_through_chunks(perm):
    # distinct tokens: every token matches exactly once, so P = R = 1
    ref = list("abcdefgh")
    pos = {w: i for i, w in enumerate(ref)}
    chunks = 1 + sum(pos[b] != pos[a] + 1 for a, b in zip(perm, perm[1:]))
    expected = 1.0 - 0.5 * (chunks / len(ref)) ** 3
    got = meteor_lite(" ".join(perm), " ".join(ref))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got <= meteor_lite(" ".join(ref), " ".join(ref))


def test_count_chunks():
    assert count_chunks([(0, 0), (1, 1), (2, 2)]) == 1
    assert count_chunks([(0, 2), (1, 0), (2, 1)]) == 2
    assert count_chunks([]) == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(WORDS), max_size=10), st.lists(st.sampled_from(WORDS), max_size=10))
def test_scores_bounded(a, b):
    a, b = " ".join(a), " ".join(b)
    for score in (rouge_n(a, b, 1)[2], rouge_n(a, b, 2)[2], rouge_l(a, b)[2], meteor_lite(a, b)):
        assert 0.0 <= score <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=2, max_size=10))
def test_identical_inputs(words):
    text = " ".join(words)
    assert rouge_n(text, text, 1)[2] == 1.0
    assert rouge_n(text, text, 2)[2] == 1.0
    assert rouge_l(text, text)[2] == 1.0
    # one chunk covering every token: only the fragmentation penalty remains
    assert meteor_lite(text, text) == pytest.approx(1.0 - 0.5 * len(tokenize(text)) ** -3, abs=1e-12)


def test_mrr_examples():
    assert mrr([1, 2, 4]) == pytest.approx(0.5833, abs=5e-5)
    assert mrr([1, 2, 4]) == (1 + 0.5 + 0.25) / 3
    assert mrr([1, 1, 1], n=3) == 1.0


def test_mrr_errors():
    with pytest.raises(ValueError):
        mrr([0])
    with pytest.raises(ValueError):
        mrr([5], n=4)
    with pytest.raises(ValueError):
        mrr([])


def test_rank_result():
    assert RankResult("q", 4).score == 0.25


def test_score_pairs_report():
    report = score_pairs(["the cat sat", "a b"], ["the cat ran", "a b"])
    assert report.rouge1 == pytest.approx((2 / 3 + 1) / 2)
    assert len(report.pairs) == 2 and report.similarity is None
    head = report.table().splitlines()[0].split("|")
    assert [h.strip() for h in head] == ["R-1", "R-2", "R-L", "METEOR"]
    lines = report.records()
    assert json.loads(lines[-1])["aggregate"]["rouge1"] == report.rouge1
    with pytest.raises(ValueError):
        score_pairs(["a"], [])


def test_score_pairs_with_embedder():
    class Unit:
        def transform(self, texts):
            return np.ones((len(texts), 2)) / np.sqrt(2)

    report = score_pairs(["x"], ["y"], Unit())
    assert report.similarity == pytest.approx(1.0)
    assert "EmbSim" in report.table()
    assert isinstance(report, MetricReport)
