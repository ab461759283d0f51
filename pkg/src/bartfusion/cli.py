"""Command-line entry point: preprocess, featurize, train, generate, evaluate, retrieve, stats."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audio import log_mel, read_wav
from .checkpoint import load_tensors, save_tensors
from .data import (filter_length, filter_votes, load_dataset, corpus_stats, parse_mode, read_id_list,
                   split_dataset, split_to_jsonable)
from .estimators import LyricInterpreter
from .metrics import score_pairs
from .retrieval import (EncoderEmbedder, TfidfEmbedder, build_index, evaluate_retrieval, index_texts,
                        make_queries)
from .tokenizer import ConfigError

SPLITS = ("train", "valid", "test")
SPLIT_META = "meta.json"


class MissingInput(Exception):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = path


def _need(path, kind: str = "path") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file() if kind == "file" else p.exists()
    if not ok:
        raise MissingInput(p)
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def _write_lines(path, lines: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _read_jsonl(path) -> list:
    with open(_need(path, "file"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _mode(value: str) -> str:
    try:
        parse_mode(value)
    except (ConfigError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


# -- commands -----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    dataset = _need(args.dataset, "file")
    test_ids = read_id_list(_need(args.test_ids, "file")) if args.test_ids else []
    records = filter_length(load_dataset(dataset))
    records = filter_votes(records, args.mode, seed=args.seed)
    split = split_dataset(records, args.valid_fraction, test_ids, seed=args.seed)
    out = Path(args.out)
    for name, rows in split_to_jsonable(split, records).items():
        _write_lines(out / f"{name}.jsonl", [_dump(r) for r in rows])
    meta = {"audio_root": str(dataset.parent), "mode": args.mode, "seed": args.seed,
            "sizes": {name: len(getattr(split, name)) for name in SPLITS}}
    _write_lines(out / SPLIT_META, [_dump(meta)])
    print(_dump(meta["sizes"]))
    return 0


def _split_rows(splits: Path, names=SPLITS) -> dict:
    _need(splits, "dir")
    return {name: _read_jsonl(splits / f"{name}.jsonl") for name in names}


def _mel_for(path: str) -> np.ndarray:
    return log_mel(read_wav(path)).values


def cmd_featurize(args) -> int:
    splits = _need(args.splits, "dir")
    root = Path(args.audio_root) if args.audio_root else Path(json.loads((splits / SPLIT_META).read_text())["audio_root"])
    songs = {}
    for rows in _split_rows(splits).values():
        for r in rows:
            if r.get("audio"):
                songs[r["song_id"]] = str(root / r["audio"])
    ids = sorted(songs)
    for sid in ids:
        _need(songs[sid], "file")
    paths = [songs[sid] for sid in ids]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            mels = list(pool.map(_mel_for, paths))
    else:
        mels = [_mel_for(p) for p in paths]
    save_tensors(args.out, dict(zip(ids, mels)), {"kind": "log-mel"})
    print(_dump({"songs": len(ids)}))
    return 0


def _load_features(path: Optional[str]) -> dict:
    if not path:
        return {}
    tensors, _ = load_tensors(_need(path, "dir"))
    return tensors


def _pairs(rows: list, features: dict, use_audio: bool) -> list:
    if not use_audio:
        return [r["lyrics"] for r in rows]
    missing = sorted({r["song_id"] for r in rows} - set(features))
    if missing:
        raise ValueError(f"no features for {len(missing)} songs, e.g. {missing[:3]}")
    return [(r["lyrics"], features[r["song_id"]]) for r in rows]


def cmd_train(args) -> int:
    rows = _split_rows(_need(args.splits, "dir"), ("train", "valid"))
    use_audio = not args.no_audio
    if use_audio and not args.features:
        raise ConfigError("--features is required unless --no-audio is given")
    features = _load_features(args.features)
    est = LyricInterpreter(
        profile=args.profile, use_audio=use_audio, vocab_size=args.vocab_size,
        max_source_len=args.max_source_len, max_target_len=args.max_target_len,
        lr_initial=args.lr, lr_reduced=args.lr_reduced, reduce_at_epoch=args.reduce_at,
        max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size,
        beam=args.beam, max_new_tokens=args.max_new, seed=args.seed,
    )
    history: list = []
    est.fit(_pairs(rows["train"], features, use_audio), [r["interpretation"] for r in rows["train"]],
            eval_set=(_pairs(rows["valid"], features, use_audio), [r["interpretation"] for r in rows["valid"]]),
            on_epoch=history.append)
    ckpt = est.save(args.checkpoint)
    _write_lines(args.history or ckpt / "history.jsonl", [_dump(h) for h in history])
    print(_dump({"best_epoch": est.best_epoch_, "best_valid_rouge1": est.best_score_}))
    return 0


def _load_model(args) -> LyricInterpreter:
    est = LyricInterpreter.load(_need(args.checkpoint, "dir"))
    est.set_params(beam=args.beam, max_new_tokens=args.max_new)
    return est


def cmd_generate(args) -> int:
    est = _load_model(args)
    if args.lyrics is not None:
        mel = _mel_for(str(_need(args.audio, "file"))) if args.audio else None
        rows = [{"song_id": "input", "lyrics": args.lyrics}]
        items = [(args.lyrics, mel) if est.use_audio else args.lyrics]
    else:
        if not args.input:
            raise ConfigError("give --lyrics or --input")
        rows = _read_jsonl(args.input)
        items = _pairs(rows, _load_features(args.features), est.use_audio)
    texts = est.predict(items)
    lines = [_dump({"song_id": r.get("song_id", str(i)), "text": t}) for i, (r, t) in enumerate(zip(rows, texts))]
    if args.out:
        _write_lines(args.out, lines)
    else:
        print("\n".join(lines))
    return 0


def _read_texts(path) -> list:
    return _need(path, "file").read_text(encoding="utf-8").splitlines()


def cmd_evaluate(args) -> int:
    cands, refs = _read_texts(args.candidates), _read_texts(args.references)
    embedder = TfidfEmbedder().fit(refs) if args.embedder == "tfidf" else None
    report = score_pairs(cands, refs, embedder)
    print(report.table())
    if args.out:
        _write_lines(args.out, report.records())
    return 0


def cmd_retrieve(args) -> int:
    rows = _split_rows(_need(args.splits, "dir"), ("test",))["test"]
    refs: dict = {}
    for r in rows:
        refs.setdefault(r["song_id"], []).append(r["interpretation"])
    song_ids = sorted(refs)
    est = _load_model(args) if args.checkpoint else None
    if args.embedder == "encoder":
        if est is None:
            raise ConfigError("--embedder encoder needs --checkpoint")
        embedder = EncoderEmbedder(est.model_, est.vocab_, est._train_config().max_source_len)
    else:
        embedder = TfidfEmbedder()
    if est is not None:
        features = _load_features(args.features)
        lyrics = {r["song_id"]: r["lyrics"] for r in rows}

        def generate(sid):
            item = (lyrics[sid], features[sid]) if est.use_audio else lyrics[sid]
            return est.predict([item])[0]

        index, texts = build_index([(sid, sid) for sid in song_ids], generate, embedder)
    else:
        texts = {sid: refs[sid][0] for sid in song_ids}
        index = index_texts(song_ids, [texts[s] for s in song_ids], embedder)
    queries = make_queries([(sid, " ".join(refs[sid])) for sid in index.song_ids], seed=args.seed)
    score, ranks = evaluate_retrieval(queries, index, embedder)
    out = Path(args.out)
    index.save(out / "index", embedder.state())
    lines = [_dump({"query": q.text, "song_id": q.song_id, "rank": k}) for q, k in zip(queries, ranks)]
    lines.append(_dump({"aggregate": {"mrr": score, "queries": len(queries), "songs": len(index),
                                      "embedder": embedder.name}}))
    _write_lines(out / "report.jsonl", lines)
    _write_lines(out / "generated.jsonl", [_dump({"song_id": s, "text": texts[s]}) for s in index.song_ids])
    print(f"MRR {100 * score:.2f}% over {len(queries)} queries, {len(index)} songs")
    return 0


def cmd_stats(args) -> int:
    records = load_dataset(_need(args.dataset, "file"))
    if args.filtered:
        records = filter_length(records)
    if args.mode != "full":
        records = filter_votes(records, args.mode, seed=args.seed)
    print(_dump(corpus_stats(records)))
    return 0


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag defaults (keys are flag names with underscores)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _decoding(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="model checkpoint directory")
    p.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    p.add_argument("--max-new", type=int, default=128, help="maximum generated tokens")


def build_parser() -> tuple:
    parser = argparse.ArgumentParser(prog="bartfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}

    p = subs["preprocess"] = sub.add_parser("preprocess", help="filter a dataset and write train/valid/test splits")
    _common(p)
    p.add_argument("--dataset", required=True, help="JSON-lines song records")
    p.add_argument("--out", required=True, help="output directory for the splits")
    p.add_argument("--mode", type=_mode, default="full", help="full | nonneg | positive | random:<n>")
    p.add_argument("--test-ids", help="file of held-out test song ids, one per line")
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_preprocess)

    p = subs["featurize"] = sub.add_parser("featurize", help="cache log-mel spectrograms for every split song")
    _common(p)
    p.add_argument("--splits", required=True, help="directory written by preprocess")
    p.add_argument("--audio-root", help="directory audio paths are relative to")
    p.add_argument("--out", required=True, help="output feature container")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_featurize)

    p = subs["train"] = sub.add_parser("train", help="train a model with early stopping")
    _common(p)
    _decoding(p)
    p.add_argument("--splits", required=True)
    p.add_argument("--features", help="feature container from featurize")
    p.add_argument("--profile", choices=("toy", "full"), default="toy")
    p.add_argument("--no-audio", action="store_true", help="train the text-only baseline")
    p.add_argument("--history", help="epoch history output (default: <checkpoint>/history.jsonl)")
    p.add_argument("--vocab-size", type=int, default=8192)
    p.add_argument("--max-source-len", type=int, default=2048)
    p.add_argument("--max-target-len", type=int, default=512)
    p.add_argument("--lr", type=float, default=6e-4)
    p.add_argument("--lr-reduced", type=float, default=6e-5)
    p.add_argument("--reduce-at", type=int, default=11, help="first epoch at the reduced rate")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_train)

    p = subs["generate"] = sub.add_parser("generate", help="interpret one song or a file of songs")
    _common(p)
    _decoding(p)
    p.add_argument("--lyrics", help="lyrics text for a single song")
    p.add_argument("--audio", help="WAV file for --lyrics")
    p.add_argument("--input", help="JSON-lines rows with song_id and lyrics")
    p.add_argument("--features", help="feature container for --input")
    p.add_argument("--out", help="JSON-lines output (default: stdout)")
    p.set_defaults(func=cmd_generate)

    p = subs["evaluate"] = sub.add_parser("evaluate", help="score candidates against references")
    _common(p)
    p.add_argument("--candidates", required=True, help="text file, one candidate per line")
    p.add_argument("--references", required=True, help="text file, one reference per line")
    p.add_argument("--embedder", choices=("none", "tfidf"), default="none", help="add an embedding similarity column")
    p.add_argument("--out", help="JSON-lines per-pair report")
    p.set_defaults(func=cmd_evaluate)

    p = subs["retrieve"] = sub.add_parser("retrieve", help="build a song index and report MRR")
    _common(p)
    _decoding(p)
    p.add_argument("--splits", required=True)
    p.add_argument("--features", help="feature container (audio models)")
    p.add_argument("--embedder", choices=("tfidf", "encoder"), default="tfidf")
    p.add_argument("--out", required=True, help="output directory for the index and report")
    p.set_defaults(func=cmd_retrieve)

    p = subs["stats"] = sub.add_parser("stats", help="corpus statistics")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", type=_mode, default="full")
    p.add_argument("--filtered", action="store_true", help="apply the length filter first")
    p.set_defaults(func=cmd_stats)
    return parser, subs


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingInput(path)
        defaults = json.loads(path.read_text(encoding="utf-8"))
        sub = subs[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except MissingInput as exc:
        print(f"bartfusion: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"bartfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"bartfusion {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"bartfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
