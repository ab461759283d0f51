import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bartfusion.metrics import tokenize
from bartfusion.retrieval import (N_BUCKETS, EmbeddingIndex, EncoderEmbedder, Query, TfidfEmbedder, _bucket,
                                  build_index, embed_text, evaluate_retrieval, harmonic_baseline, index_texts,
                                  make_queries, query_rank, random_embedding_mrr, split_sentences)
from bartfusion.tokenizer import build_vocab

from conftest import tiny_model

DOCS = {
    "s1": "a slow song about losing a lover on a cold night.",
    "s2": "driving down the highway with the radio loud and the windows open.",
    "s3": "a soldier writes home from the battlefield about his fear.",
    "s4": "the crowd dances until sunrise under flashing lights.",
}


class Lookup:
    """Embedder returning fixed vectors for known strings."""

    name = "lookup"

    def __init__(self, table):
        self.table = table

    def fit(self, texts):
        return self

    def transform(self, texts):
        rows = np.array([self.table[t] for t in texts], dtype=np.float64)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_same_text_same_vector():
    emb = TfidfEmbedder().fit(list(DOCS.values()))
    a, b = embed_text(DOCS["s1"], emb), embed_text(DOCS["s1"], emb)
    assert np.array_equal(a, b)
    assert a.shape == (N_BUCKETS,)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6


def test_empty_text_rejected():
    emb = TfidfEmbedder()
    for bad in ("", "   ", "!!! ..."):
        with pytest.raises(ValueError):
            embed_text(bad, emb)


def test_disjoint_vocabularies_are_orthogonal():
    a, b = "moon stars midnight dream", "engine highway wheels dust"
    assert not {_bucket(t, N_BUCKETS) for t in tokenize(a)} & {_bucket(t, N_BUCKETS) for t in tokenize(b)}
    emb = TfidfEmbedder().fit([a, b])
    assert abs(float(embed_text(a, emb) @ embed_text(b, emb))) < 1e-12


def test_tfidf_weights_by_hand():
    emb = TfidfEmbedder(n_buckets=1 << 20).fit(["x x y", "y z"])
    v = embed_text("x x y", emb)
    idf = {"x": np.log(3 / 2) + 1, "y": np.log(3 / 3) + 1}
    raw = {"x": (1 + np.log(2)) * idf["x"], "y": 1.0 * idf["y"]}
    norm = np.hypot(raw["x"], raw["y"])
    assert v[_bucket("x", 1 << 20)] == pytest.approx(raw["x"] / norm)
    assert v[_bucket("y", 1 << 20)] == pytest.approx(raw["y"] / norm)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("love night road fire rain home light dark".split()), min_size=1, max_size=8),
       st.lists(st.sampled_from("love night road fire rain home light dark".split()), min_size=1, max_size=8))
def test_cosine_symmetric_and_bounded(a, b):
    emb = TfidfEmbedder().fit([" ".join(a), " ".join(b)])
    va, vb = embed_text(" ".join(a), emb), embed_text(" ".join(b), emb)
    assert va @ vb == pytest.approx(vb @ va)
    assert -1.0 - 1e-9 <= va @ vb <= 1.0 + 1e-9
    assert va @ va == pytest.approx(1.0, abs=1e-6)


def test_hand_built_ordering():
    index = EmbeddingIndex(["a", "b", "c"], np.array([[1, 0], [0.6, 0.8], [0, 1]]), "lookup")
    emb = Lookup({"q": [0.8, 0.6], "tie": [1, 1]})
    # cosines 0.8, 0.96, 0.6
    assert query_rank("q", index, emb) == ["b", "a", "c"]
    # a and c tie at 0.707; the id breaks the tie
    assert query_rank("tie", index, emb) == ["b", "a", "c"]


def test_hand_built_ranks_give_mrr():
    eye = np.eye(4)
    index = EmbeddingIndex(["s1", "s2", "s3", "s4"], eye, "lookup")
    emb = Lookup({"q1": eye[0], "q2": 2 * eye[0] + eye[1], "q3": eye[2], "q4": 3 * eye[0] + 2 * eye[1] + eye[2]})
    queries = [Query("q1", "s1"), Query("q2", "s2"), Query("q3", "s3"), Query("q4", "s4")]
    score, ranks = evaluate_retrieval(queries, index, emb)
    assert ranks == [1, 2, 1, 4]
    assert score == 0.6875


def test_self_retrieval():
    emb = TfidfEmbedder()
    index = index_texts(list(DOCS), list(DOCS.values()), emb)
    for sid, text in DOCS.items():
        ranked = query_rank(text, index, emb)
        assert ranked[0] == sid and sorted(ranked) == sorted(DOCS)
    score, _ = evaluate_retrieval([Query(t, s) for s, t in DOCS.items()], index, emb)
    assert score == 1.0


def test_index_vectors_unit_norm():
    index = index_texts(list(DOCS), list(DOCS.values()), TfidfEmbedder())
    np.testing.assert_allclose(np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-6)


def test_index_validation():
    with pytest.raises(ValueError):
        EmbeddingIndex(["a", "a"], np.eye(2), "x")
    with pytest.raises(ValueError):
        EmbeddingIndex(["a"], np.eye(2), "x")
    with pytest.raises(ValueError):
        query_rank("q", EmbeddingIndex([], np.zeros((0, 2)), "x"), Lookup({"q": [1, 0]}))


def test_build_index_skips_failures():
    def generate(payload):
        if payload == "boom":
            raise RuntimeError("decoder failed")
        return "" if payload == "blank" else f"a song about {payload}"

    songs = [("s1", "love"), ("s2", "boom"), ("s3", "blank"), ("s4", "war")]
    with pytest.warns(UserWarning) as record:
        index, texts = build_index(songs, generate, TfidfEmbedder())
    assert index.song_ids == ["s1", "s4"] and len(record) == 2
    assert texts == {"s1": "a song about love", "s4": "a song about war"}
    with pytest.raises(ValueError), pytest.warns(UserWarning):
        build_index([("s2", "boom")], generate, TfidfEmbedder())


def test_three_songs_three_entries():
    index, _ = build_index([(s, s) for s in ("x1", "x2", "x3")], lambda p: f"song {p}", TfidfEmbedder())
    assert len(index) == 3


def test_index_save_is_byte_stable(tmp_path):
    blobs = []
    for run in range(2):
        emb = TfidfEmbedder()
        index = index_texts(list(DOCS), list(DOCS.values()), emb)
        path = index.save(tmp_path / f"idx{run}", emb.state())
        blobs.append({p.name: p.read_bytes() for p in sorted(path.iterdir())})
    assert blobs[0] == blobs[1]


def test_index_round_trip(tmp_path):
    emb = TfidfEmbedder()
    index = index_texts(list(DOCS), list(DOCS.values()), emb)
    loaded, state = EmbeddingIndex.load(index.save(tmp_path / "idx", emb.state()))
    assert loaded.song_ids == index.song_ids and loaded.embedder_id == "tfidf"
    assert np.array_equal(loaded.vectors, index.vectors)
    fresh = TfidfEmbedder()
    fresh.load_state(state)
    assert np.array_equal(fresh.idf, emb.idf)
    assert np.array_equal(embed_text(DOCS["s2"], fresh), embed_text(DOCS["s2"], emb))


def test_split_sentences():
    text = "Short one. This sentence is long enough to count! Another qualifying sentence here? ok"
    assert split_sentences(text) == ["This sentence is long enough to count", "Another qualifying sentence here"]


def test_make_queries():
    refs = [("a", "Only one sentence is long enough here. tiny."), ("b", "no. no."),
            ("c", "First long enough sentence goes here. Second long enough sentence is here.")]
    with pytest.warns(UserWarning):
        queries = make_queries(refs, seed=3)
    assert [q.song_id for q in queries] == ["a", "c"]
    assert queries[0].text == "Only one sentence is long enough here"
    assert all(len(q.text) >= 20 for q in queries)
    with pytest.warns(UserWarning):
        assert make_queries(refs, seed=3) == queries


def test_queries_cover_sentences_across_seeds():
    refs = [("c", "First long enough sentence goes here. Second long enough sentence is here.")]
    seen = {make_queries(refs, seed=s)[0].text for s in range(20)}
    assert len(seen) == 2


def test_missing_song_raises():
    index = index_texts(["s1"], [DOCS["s1"]], TfidfEmbedder())
    with pytest.raises(ValueError):
        evaluate_retrieval([Query("anything at all", "s9")], index, TfidfEmbedder())


def test_random_baseline_matches_harmonic_mean():
    scores = random_embedding_mrr(800, trials=1000, seed=0)
    expected = harmonic_baseline(800)
    assert expected == pytest.approx(0.0091, abs=5e-5)
    assert abs(scores.mean() - expected) <= 0.3 * expected
    assert 0.007 <= scores.mean() <= 0.012


def test_random_baseline_small_n_exact():
    assert harmonic_baseline(1) == 1.0
    assert harmonic_baseline(2) == 0.75
    assert random_embedding_mrr(1, trials=5).tolist() == [1.0] * 5


def test_encoder_embedder():
    corpus = list(DOCS.values())
    vocab = build_vocab(corpus, 300)
    model = tiny_model(vocab_size=len(vocab), max_positions=64, max_target_positions=64)
    model.train()
    emb = EncoderEmbedder(model, vocab, max_len=64)
    vecs = emb.transform(corpus)
    assert vecs.shape == (4, model.cfg.d_model)
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(vecs, emb.transform(corpus))
    assert model.training
    # a padded row embeds exactly as it does alone
    np.testing.assert_allclose(emb.transform([corpus[0]])[0], vecs[0], atol=1e-6)
    with pytest.raises(ValueError):
        emb.transform([""])
