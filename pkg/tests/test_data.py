import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bartfusion.data import (MAX_CHARS, MIN_CHARS, DatasetSplit, InterpretationRecord, SongRecord, corpus_stats,
                             filter_length, filter_votes, load_dataset, parse_mode, read_id_list, save_dataset,
                             split_dataset, split_to_jsonable, truncate_text)
from bartfusion.synthetic import random_song_records
from bartfusion.tokenizer import ConfigError


def items(records):
    return {(r.song_id, it.index) for r in records for it in r.interpretations}


def song(sid, *interps, genre=""):
    return SongRecord(sid, "la la", genre=genre,
                      interpretations=tuple(InterpretationRecord(t, v, k) for k, (t, v) in enumerate(interps)))


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


# loading

def test_load_empty_file(tmp_path):
    assert load_dataset(write_lines(tmp_path / "d.jsonl", [])) == []


def test_load_one_record(tmp_path):
    rec = {"song_id": "a", "lyrics": "la", "interpretations": [{"text": "x", "votes": -2}]}
    [r] = load_dataset(write_lines(tmp_path / "d.jsonl", [json.dumps(rec), ""]))
    assert r.song_id == "a" and r.interpretations[0].votes == -2


def test_load_rejects_duplicate_ids(tmp_path):
    rec = json.dumps({"song_id": "a", "lyrics": "la"})
    with pytest.raises(ValueError, match="line 2"):
        load_dataset(write_lines(tmp_path / "d.jsonl", [rec, rec]))


@pytest.mark.parametrize("line", ["{not json", "[1, 2]", json.dumps({"lyrics": "x"}),
                                  json.dumps({"song_id": "a", "lyrics": "  "})])
def test_load_reports_line_number(tmp_path, line):
    ok = json.dumps({"song_id": "ok", "lyrics": "la"})
    with pytest.raises(ValueError, match="line 2"):
        load_dataset(write_lines(tmp_path / "d.jsonl", [ok, line]))


def test_save_load_round_trip(tmp_path):
    records = random_song_records(5, seed=1)
    save_dataset(records, tmp_path / "d.jsonl")
    loaded = load_dataset(tmp_path / "d.jsonl")
    assert [r.to_json() for r in loaded] == [r.to_json() for r in records]


# length filter

def test_length_boundaries():
    short, exact = "x" * 255, "y" * 256
    [r] = filter_length([song("a", (short, 1), (exact, 1))])
    assert [it.text for it in r.interpretations] == [exact]
    assert filter_length([song("b", (short, 1))]) == []


def test_truncation_mid_word():
    text = "word " * 409 + "abcdefghij" + " tail" * 10  # the 2048th char falls inside abcdefghij
    assert len(text) >= 2100 and text[2047] != " "
    out = truncate_text(text)
    assert out == ("word " * 409).rstrip()
    assert len(out) <= MAX_CHARS


def test_truncation_without_whitespace_hard_cuts():
    assert truncate_text("z" * 3000) == "z" * MAX_CHARS


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.sampled_from("ab \n"), min_size=1, max_size=60), st.integers(1, 30))
def test_truncation_never_splits_a_word(text, limit):
    out = truncate_text(text, limit)
    assert len(out) <= limit
    assert text.startswith(out)
    if len(text) <= limit:
        assert out == text
        return
    # a cut point is whitespace within reach that follows some non-blank text
    cuts = [i for i in range(limit + 1) if text[i].isspace() and text[:i].strip()]
    if cuts:
        assert out == text[: cuts[-1]].rstrip()
        assert text[len(out)].isspace() and not out[-1].isspace()
    else:
        assert out == text[:limit]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_filter_length_property(seed):
    records = random_song_records(20, seed=seed)
    originals = {(r.song_id, it.index): it.text for r in records for it in r.interpretations}
    for r in filter_length(records):
        for it in r.interpretations:
            assert MIN_CHARS <= len(it.text) <= MAX_CHARS
            orig = originals[(r.song_id, it.index)]
            assert orig.startswith(it.text)
            if it.text != orig:
                assert orig[len(it.text)].isspace()


# vote subsets

def test_vote_modes_example():
    records = [song("a", ("neg", -1), ("zero", 0), ("pos", 2))]
    [pos] = filter_votes(records, "positive")
    [nonneg] = filter_votes(records, "nonneg")
    assert [it.text for it in pos.interpretations] == ["pos"]
    assert [it.text for it in nonneg.interpretations] == ["zero", "pos"]
    assert items(filter_votes(records, "full")) == items(records)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_vote_subsets_nested(seed):
    records = random_song_records(15, seed=seed)
    full, nonneg, pos = (items(filter_votes(records, m)) for m in ("full", "nonneg", "positive"))
    assert pos <= nonneg <= full == items(records)


def test_random_subset_is_seeded_and_sized():
    records = random_song_records(30, seed=2)
    a = filter_votes(records, "random:10", seed=5)
    assert len(items(a)) == 10
    assert items(a) == items(filter_votes(records, "random", n=10, seed=5))
    assert items(a) <= items(records)
    with pytest.raises(ValueError):
        filter_votes(records, "random", n=len(items(records)) + 1)


def test_unknown_mode():
    with pytest.raises(ConfigError):
        parse_mode("best")
    with pytest.raises(ConfigError):
        filter_votes([], "best")


# splits

def test_empty_test_list():
    split = split_dataset(random_song_records(10, seed=0), 0.2)
    assert split.test == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_splits_are_song_disjoint_from_test(seed, frac):
    records = random_song_records(12, seed=seed)
    test_ids = [r.song_id for r in records[::3]]
    split = split_dataset(records, frac, test_ids, seed=seed)
    test_songs = {s for s, _ in split.test}
    assert test_songs.isdisjoint(s for s, _ in split.train)
    assert test_songs.isdisjoint(s for s, _ in split.valid)
    assert set(split.test) == items(r for r in records if r.song_id in test_ids)
    assert sorted(split.train + split.valid + split.test) == sorted(items(records))


def test_split_seed_determinism():
    records = random_song_records(20, seed=4)
    a = split_dataset(records, 0.3, ["s0001"], seed=9)
    b = split_dataset(records, 0.3, ["s0001"], seed=9)
    assert a == b


def test_split_bad_fraction():
    with pytest.raises(ConfigError):
        split_dataset([], 1.0)


def test_split_warns_on_unknown_test_id():
    with pytest.warns(UserWarning):
        split_dataset(random_song_records(3), 0.5, ["nope"])


def test_check_disjoint_catches_leak():
    with pytest.raises(AssertionError):
        DatasetSplit(train=[("a", 0)], test=[("a", 1)]).check_disjoint()


def test_split_rows_are_self_contained():
    records = [song("a", ("x" * 300, 3))]
    rows = split_to_jsonable(split_dataset(records, 0.5, ["a"]), records)
    assert rows["test"][0]["interpretation"] == "x" * 300 and rows["train"] == []


def test_read_id_list(tmp_path):
    assert read_id_list(write_lines(tmp_path / "ids.txt", ["a", "", " b "])) == ["a", "b"]


# stats

def test_stats_single_interpretation():
    stats = corpus_stats([song("a", (" ".join(["w"] * 10), 1))])
    assert stats["mean_words"] == 10.0


def test_stats_constructed_corpus():
    records = [song("a", ("one two", 1), ("three", -1), genre="rock"),
               song("b", ("four five six", 0), genre="rock"),
               song("c", ("seven", 2))]
    assert corpus_stats(records) == {
        "songs": 3,
        "interpretations": 4,
        "mean_words": 7 / 4,
        "genres": {"rock": 2, "unknown": 1},
        "subsets": {"full": 4, "nonneg": 3, "positive": 2},
    }


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_stats_subset_sizes_match_filters(seed):
    records = random_song_records(10, seed=seed)
    stats = corpus_stats(records)["subsets"]
    for mode in ("full", "nonneg", "positive"):
        assert stats[mode] == len(items(filter_votes(records, mode)))
    assert stats["positive"] <= stats["nonneg"] <= stats["full"]
