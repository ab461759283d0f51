"""Song Interpretation Dataset records: loading, filtering and splitting."""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .tokenizer import ConfigError

MIN_CHARS = 256
MAX_CHARS = 2048
_SPACE = re.compile(r"\s")


@dataclass(frozen=True)
class InterpretationRecord:
    text: str
    votes: int = 0
    index: int = 0  # position in the song's raw interpretation list


@dataclass(frozen=True)
class SongRecord:
    song_id: str
    lyrics: str
    title: str = ""
    artist: str = ""
    genre: str = ""
    audio_path: str = ""
    interpretations: tuple = ()

    def to_json(self) -> str:
        return json.dumps({
            "song_id": self.song_id,
            "title": self.title,
            "artist": self.artist,
            "genre": self.genre,
            "lyrics": self.lyrics,
            "audio": self.audio_path,
            "interpretations": [{"text": i.text, "votes": i.votes} for i in self.interpretations],
        }, ensure_ascii=False)


@dataclass
class DatasetSplit:
    """Lists of ``(song_id, interpretation index)`` items."""

    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def check_disjoint(self) -> None:
        test_songs = {s for s, _ in self.test}
        if test_songs & {s for s, _ in self.train}:
            raise AssertionError("test songs leaked into the training split")
        if test_songs & {s for s, _ in self.valid}:
            raise AssertionError("test songs leaked into the validation split")


def _parse(obj: dict, lineno: int) -> SongRecord:
    try:
        interps = tuple(
            InterpretationRecord(str(it["text"]), int(it.get("votes", 0)), k)
            for k, it in enumerate(obj.get("interpretations", []))
        )
        record = SongRecord(
            song_id=str(obj["song_id"]),
            lyrics=str(obj["lyrics"]),
            title=str(obj.get("title", "")),
            artist=str(obj.get("artist", "")),
            genre=str(obj.get("genre", "")),
            audio_path=str(obj.get("audio", "")),
            interpretations=interps,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"line {lineno}: invalid record ({exc})") from exc
    if not record.lyrics.strip():
        raise ValueError(f"line {lineno}: lyrics must be non-empty")
    return record


def load_dataset(path) -> list:
    """Read one JSON song record per line; blank lines are skipped."""
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"line {lineno}: expected a JSON object")
            record = _parse(obj, lineno)
            if record.song_id in seen:
                raise ValueError(f"line {lineno}: duplicate song_id {record.song_id!r}")
            seen.add(record.song_id)
            records.append(record)
    return records


def save_dataset(records: Iterable[SongRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def _keep(records: Iterable[SongRecord], interps_for) -> list:
    out = []
    for r in records:
        kept = tuple(interps_for(r))
        if kept:
            out.append(replace(r, interpretations=kept))
    return out


def truncate_text(text: str, limit: int = MAX_CHARS) -> str:
    """Cut to at most ``limit`` characters without splitting a word.

    The cut falls at the last whitespace at or before index ``limit`` and
    trailing whitespace is dropped.  A text with no whitespace in range is
    hard-cut at ``limit``.
    """
    if len(text) <= limit:
        return text
    spaces = [m.start() for m in _SPACE.finditer(text, 0, limit + 1)]
    if not spaces or not text[: spaces[-1]].strip():
        return text[:limit]
    return text[: spaces[-1]].rstrip()


def filter_length(records: Iterable[SongRecord], min_chars: int = MIN_CHARS, max_chars: int = MAX_CHARS) -> list:
    """Drop short interpretations and trim long ones at a word boundary."""

    def interps(r):
        for it in r.interpretations:
            if len(it.text) < min_chars:
                continue
            text = truncate_text(it.text, max_chars)
            if len(text) < min_chars:
                continue
            yield replace(it, text=text)

    return _keep(records, interps)


def parse_mode(mode: str) -> tuple:
    """``'random:500'`` -> ``('random', 500)``; other modes carry ``None``."""
    if mode.startswith("random:"):
        return "random", int(mode.split(":", 1)[1])
    if mode in ("full", "nonneg", "positive"):
        return mode, None
    raise ConfigError(f"unknown dataset mode {mode!r}")


def filter_votes(records: Sequence[SongRecord], mode: str = "full", n: Optional[int] = None, seed: int = 0) -> list:
    """Vote subsets: ``full``, ``nonneg`` (votes >= 0), ``positive`` (> 0) or a
    seeded uniform ``random`` sample of ``n`` interpretations."""
    if mode.startswith("random:"):
        mode, n = parse_mode(mode)
    if mode == "full":
        return _keep(records, lambda r: r.interpretations)
    if mode == "nonneg":
        return _keep(records, lambda r: (i for i in r.interpretations if i.votes >= 0))
    if mode == "positive":
        return _keep(records, lambda r: (i for i in r.interpretations if i.votes > 0))
    if mode != "random":
        raise ConfigError(f"unknown dataset mode {mode!r}")
    items = [(r.song_id, it.index) for r in records for it in r.interpretations]
    if n is None or n < 0 or n > len(items):
        raise ValueError(f"cannot sample {n} of {len(items)} interpretations")
    rng = np.random.default_rng(seed)
    chosen = {items[i] for i in rng.choice(len(items), size=n, replace=False)}
    return _keep(records, lambda r: (i for i in r.interpretations if (r.song_id, i.index) in chosen))


def split_dataset(records: Sequence[SongRecord], valid_fraction: float = 0.1,
                  test_song_ids: Iterable[str] = (), seed: int = 0) -> DatasetSplit:
    """Hold out every interpretation of the listed test songs, then split the
    rest into train/valid by a seeded shuffle of interpretations."""
    if not 0.0 < valid_fraction < 1.0:
        raise ConfigError(f"valid_fraction must lie in (0, 1), got {valid_fraction}")
    test_ids = set(test_song_ids)
    known = {r.song_id for r in records}
    missing = sorted(test_ids - known)
    if missing:
        warnings.warn(f"{len(missing)} test song ids are not in the dataset: {missing[:5]}", stacklevel=2)
    split = DatasetSplit()
    rest = []
    for r in records:
        items = [(r.song_id, it.index) for it in r.interpretations]
        (split.test if r.song_id in test_ids else rest).extend(items)
    order = np.random.default_rng(seed).permutation(len(rest))
    n_valid = int(round(valid_fraction * len(rest)))
    split.valid = sorted(rest[i] for i in order[:n_valid])
    split.train = sorted(rest[i] for i in order[n_valid:])
    split.check_disjoint()
    return split


def read_id_list(path) -> list:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def corpus_stats(records: Sequence[SongRecord]) -> dict:
    """Song/interpretation counts, mean interpretation length in words,
    genre histogram and the size of each vote subset."""
    interps = [it for r in records for it in r.interpretations]
    words = [len(it.text.split()) for it in interps]
    genres = Counter(r.genre or "unknown" for r in records)
    return {
        "songs": len(records),
        "interpretations": len(interps),
        "mean_words": float(np.mean(words)) if words else 0.0,
        "genres": dict(sorted(genres.items(), key=lambda kv: (-kv[1], kv[0]))),
        "subsets": {
            "full": len(interps),
            "nonneg": sum(it.votes >= 0 for it in interps),
            "positive": sum(it.votes > 0 for it in interps),
        },
    }


def lookup(records: Sequence[SongRecord]) -> dict:
    """``(song_id, index) -> (record, interpretation)``."""
    return {(r.song_id, it.index): (r, it) for r in records for it in r.interpretations}


def split_to_jsonable(split: DatasetSplit, records: Sequence[SongRecord]) -> dict:
    """Self-contained rows per split: song fields plus the interpretation."""
    table = lookup(records)
    out = {}
    for name in ("train", "valid", "test"):
        rows = []
        for key in getattr(split, name):
            r, it = table[key]
            rows.append({
                "song_id": r.song_id,
                "index": it.index,
                "lyrics": r.lyrics,
                "audio": r.audio_path,
                "genre": r.genre,
                "interpretation": it.text,
                "votes": it.votes,
            })
        out[name] = rows
    return out


__all__ = [
    "InterpretationRecord",
    "SongRecord",
    "DatasetSplit",
    "load_dataset",
    "save_dataset",
    "truncate_text",
    "filter_length",
    "filter_votes",
    "parse_mode",
    "split_dataset",
    "read_id_list",
    "corpus_stats",
    "split_to_jsonable",
]
