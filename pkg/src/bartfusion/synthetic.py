"""Seeded synthetic corpora for smoke tests, demos and directional checks.

``tone_corpus`` builds (lyrics, audio, interpretation) triples in which part
of every interpretation names a property of the audio (its dominant
frequency band) that the lyrics do not reveal, so only a model that listens
can get those words right.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, log_mel, write_wav
from .data import SongRecord, InterpretationRecord

TONE_CLASSES = (
    (220.0, "deep rumbling bass"),
    (660.0, "warm mellow guitar"),
    (1800.0, "bright ringing piano"),
    (4200.0, "shrill piercing whistle"),
)

TOPICS = {
    "love": "heart kiss darling forever hold tender embrace",
    "loss": "gone empty tears goodbye missing cold alone",
    "road": "highway drive miles wheels engine dust horizon",
    "night": "moon stars dark shadows midnight dream sleep",
    "party": "dance lights crowd drinks music floor loud",
    "war": "soldier battle guns flag smoke fight enemy",
}

FILLER = "oh yeah we the and i you my your in on of to it is all now".split()


def tone_clip(freq: float, seconds: float, rng: np.random.Generator, noise: float = 0.05) -> AudioClip:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    amp = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0, 2 * np.pi)
    detune = freq * rng.uniform(-0.03, 0.03)
    x = amp * np.sin(2 * np.pi * (freq + detune) * t + phase) + noise * rng.standard_normal(n)
    return AudioClip(x, SAMPLE_RATE)


def make_lyrics(topic: str, rng: np.random.Generator, n_words: int = 12) -> str:
    words = TOPICS[topic].split()
    picks = [words[i] if rng.random() < 0.6 else FILLER[j]
             for i, j in zip(rng.integers(0, len(words), n_words), rng.integers(0, len(FILLER), n_words))]
    return " ".join(picks)


def make_interpretation(topic: str, tone: int) -> str:
    return f"a song about {topic} with {TONE_CLASSES[tone][1]}"


@dataclass
class ToneItem:
    song_id: str
    lyrics: str
    interpretation: str
    topic: str
    tone: int
    clip: AudioClip


def tone_corpus(n: int, seed: int = 0, seconds: float = 1.0, n_tones: Optional[int] = None) -> list:
    """``n`` items with topic and tone drawn independently and uniformly."""
    rng = np.random.default_rng(seed)
    topics = sorted(TOPICS)
    n_tones = n_tones or len(TONE_CLASSES)
    items = []
    for k in range(n):
        topic = topics[int(rng.integers(len(topics)))]
        tone = int(rng.integers(n_tones))
        clip = tone_clip(TONE_CLASSES[tone][0], seconds, rng)
        items.append(ToneItem(f"song{seed}_{k:04d}", make_lyrics(topic, rng), make_interpretation(topic, tone),
                              topic, tone, clip))
    return items


def tone_mels(items) -> list:
    return [log_mel(it.clip).values for it in items]


def write_song_corpus(directory, items, votes_seed: int = 0, pad_to: int = 300) -> Path:
    """Write a dataset file plus WAVs for ``items``; returns the dataset path.

    Interpretations are padded with a neutral sentence to ``pad_to``
    characters so they survive the length filter, and each song also gets
    one short (filtered) and one negative-vote interpretation.
    """
    directory = Path(directory)
    (directory / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(votes_seed)
    records = []
    for it in items:
        wav = Path("audio") / f"{it.song_id}.wav"
        write_wav(directory / wav, it.clip)
        text = it.interpretation + "."
        while len(text) < pad_to:
            text += " I think the lyrics say a lot about life."
        interps = (
            InterpretationRecord(text, int(rng.integers(1, 10)), 0),
            InterpretationRecord("too short to keep.", int(rng.integers(-3, 10)), 1),
            InterpretationRecord(text.replace("I think", "Maybe"), int(rng.integers(-5, 0)), 2),
        )
        records.append(SongRecord(it.song_id, it.lyrics, title=it.song_id, artist="synthetic",
                                  genre=it.topic, audio_path=str(wav), interpretations=interps))
    path = directory / "dataset.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    return path


def random_song_records(n_songs: int, seed: int = 0, max_interps: int = 5) -> list:
    """Records with interpretation lengths spread around the 256/2048 limits."""
    rng = np.random.default_rng(seed)
    words = "the song is about love loss hope pain light dark road home time friend music night".split()
    records = []
    for s in range(n_songs):
        interps = []
        for k in range(int(rng.integers(1, max_interps + 1))):
            target = int(rng.choice([rng.integers(1, 256), rng.integers(240, 270), rng.integers(256, 2048),
                                     rng.integers(2040, 2100), rng.integers(2048, 3000)]))
            text = ""
            while len(text) < target:
                w = words[int(rng.integers(len(words)))]
                if rng.random() < 0.05:
                    w = w * int(rng.integers(2, 12))
                text += (" " if text else "") + w
            interps.append(InterpretationRecord(text, int(rng.integers(-5, 6)), k))
        records.append(SongRecord(f"s{s:04d}", "la la la", genre=str(rng.choice(["rock", "pop", "folk"])),
                                  interpretations=tuple(interps)))
    return records
