import json
import subprocess
import sys

import pytest

from bartfusion.cli import build_parser, main
from bartfusion.synthetic import tone_corpus, write_song_corpus

TRAIN_FLAGS = ["--vocab-size", "300", "--epochs", "2", "--reduce-at", "2", "--batch-size", "4",
               "--max-new", "16", "--seed", "3"]


def run(*argv):
    return main([str(a) for a in argv])


def files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    items = tone_corpus(14, seed=2, seconds=0.5)
    dataset = write_song_corpus(root / "data", items)
    (root / "test_ids.txt").write_text("\n".join(it.song_id for it in items[:4]) + "\n")
    assert run("preprocess", "--dataset", dataset, "--out", root / "splits", "--test-ids", root / "test_ids.txt",
               "--valid-fraction", "0.2", "--seed", "1") == 0
    assert run("featurize", "--splits", root / "splits", "--out", root / "feats") == 0
    assert run("train", "--splits", root / "splits", "--features", root / "feats", "--checkpoint", root / "ckpt",
               *TRAIN_FLAGS) == 0
    return root, dataset, items


def test_help_lists_every_flag(capsys):
    _, subs = build_parser()
    assert sorted(subs) == ["evaluate", "featurize", "generate", "preprocess", "retrieve", "stats", "train"]
    for name, sub in subs.items():
        with pytest.raises(SystemExit) as exit_info:
            main([name, "--help"])
        assert exit_info.value.code == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "bartfusion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "preprocess" in out.stdout


@pytest.mark.parametrize("argv", [["nope"], ["stats", "--bogus"], ["preprocess", "--mode", "best",
                                                                   "--dataset", "x", "--out", "y"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exit_info:
        main(argv)
    assert exit_info.value.code == 2


def test_missing_input_exits_1(tmp_path, capsys):
    assert run("stats", "--dataset", tmp_path / "absent.jsonl") == 1
    assert "absent.jsonl" in capsys.readouterr().err
    assert run("stats", "--dataset", "x", "--config", tmp_path / "none.json") == 1


def test_config_file_supplies_defaults(work, tmp_path, capsys):
    root, dataset, _ = work
    (tmp_path / "cfg.json").write_text(json.dumps({"mode": "positive", "filtered": True}))
    assert run("stats", "--dataset", dataset, "--config", tmp_path / "cfg.json") == 0
    via_config = capsys.readouterr().out
    assert run("stats", "--dataset", dataset, "--mode", "positive", "--filtered") == 0
    assert capsys.readouterr().out == via_config
    (tmp_path / "bad.json").write_text(json.dumps({"colour": "red"}))
    with pytest.raises(SystemExit) as exit_info:
        run("stats", "--dataset", dataset, "--config", tmp_path / "bad.json")
    assert exit_info.value.code == 2


def test_bad_schedule_is_config_error(work, tmp_path):
    root, _, _ = work
    assert run("train", "--splits", root / "splits", "--no-audio", "--checkpoint", tmp_path / "c",
               "--epochs", "2") == 2


def test_preprocess_positive_mode(work, tmp_path):
    _, dataset, _ = work
    assert run("preprocess", "--dataset", dataset, "--out", tmp_path / "pos", "--mode", "positive") == 0
    rows = [json.loads(line) for name in ("train", "valid", "test")
            for line in (tmp_path / "pos" / f"{name}.jsonl").read_text().splitlines()]
    assert rows and all(r["votes"] > 0 for r in rows)
    assert all(len(r["interpretation"]) >= 256 for r in rows)


def test_preprocess_keeps_test_songs_out_of_training(work):
    root, _, items = work
    held = {it.song_id for it in items[:4]}
    for name in ("train", "valid"):
        rows = [json.loads(line) for line in (root / "splits" / f"{name}.jsonl").read_text().splitlines()]
        assert held.isdisjoint(r["song_id"] for r in rows)
    test_rows = (root / "splits" / "test.jsonl").read_text().splitlines()
    assert {json.loads(line)["song_id"] for line in test_rows} == held


def test_preprocess_is_byte_identical(work, tmp_path):
    _, dataset, _ = work
    for d in ("a", "b"):
        assert run("preprocess", "--dataset", dataset, "--out", tmp_path / d, "--seed", "5") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_train_writes_checkpoint_and_history(work):
    root, _, _ = work
    names = set(files(root / "ckpt"))
    assert {"manifest.tsv", "tensors.bin", "config.json", "vocab.txt", "history.jsonl"} <= names
    history = [json.loads(line) for line in (root / "ckpt" / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [1, 2]
    assert set(history[0]) >= {"epoch", "loss", "valid_rouge1", "lr"}


def test_generate_single_and_batch(work, tmp_path, capsys):
    root, dataset, items = work
    wav = dataset.parent / "audio" / f"{items[0].song_id}.wav"
    assert run("generate", "--checkpoint", root / "ckpt", "--lyrics", items[0].lyrics, "--audio", wav,
               "--max-new", "8") == 0
    row = json.loads(capsys.readouterr().out.strip())
    assert isinstance(row["text"], str)
    assert run("generate", "--checkpoint", root / "ckpt", "--input", root / "splits" / "test.jsonl",
               "--features", root / "feats", "--out", tmp_path / "gen.jsonl", "--beam", "2", "--max-new", "8") == 0
    n_rows = len((root / "splits" / "test.jsonl").read_text().splitlines())
    assert len((tmp_path / "gen.jsonl").read_text().splitlines()) == n_rows


def test_evaluate_identical_files(tmp_path, capsys):
    lines = "the song is about love and loss\na drive down a long road at night\n"
    (tmp_path / "c.txt").write_text(lines)
    (tmp_path / "r.txt").write_text(lines)
    assert run("evaluate", "--candidates", tmp_path / "c.txt", "--references", tmp_path / "r.txt",
               "--embedder", "tfidf", "--out", tmp_path / "rep.jsonl") == 0
    head, values = capsys.readouterr().out.strip().splitlines()
    assert [h.strip() for h in head.split("|")] == ["R-1", "R-2", "R-L", "METEOR", "EmbSim"]
    assert [v.strip() for v in values.split("|")][:3] == ["100.0"] * 3
    agg = json.loads((tmp_path / "rep.jsonl").read_text().splitlines()[-1])["aggregate"]
    assert agg["rouge1"] == agg["rouge2"] == agg["rougeL"] == 1.0


def test_retrieve_is_byte_identical(work, tmp_path):
    root, _, _ = work
    for d in ("a", "b"):
        assert run("retrieve", "--splits", root / "splits", "--embedder", "tfidf", "--seed", "7",
                   "--out", tmp_path / d) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    agg = json.loads((tmp_path / "a" / "report.jsonl").read_text().splitlines()[-1])["aggregate"]
    assert 0.0 < agg["mrr"] <= 1.0 and agg["songs"] == 4


def test_retrieve_with_model_and_encoder(work, tmp_path):
    root, _, _ = work
    assert run("retrieve", "--splits", root / "splits", "--features", root / "feats", "--checkpoint", root / "ckpt",
               "--embedder", "encoder", "--max-new", "8", "--out", tmp_path / "r") == 0
    assert {"report.jsonl", "generated.jsonl", "index/index.json"} <= set(files(tmp_path / "r"))
    assert run("retrieve", "--splits", root / "splits", "--embedder", "encoder", "--out", tmp_path / "x") == 2


def test_featurize_workers_match_serial(work, tmp_path):
    root, _, _ = work
    assert run("featurize", "--splits", root / "splits", "--out", tmp_path / "f2", "--workers", "2") == 0
    assert files(tmp_path / "f2") == files(root / "feats")


def test_stats(work, capsys):
    _, dataset, items = work
    assert run("stats", "--dataset", dataset) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["songs"] == len(items) and stats["interpretations"] == 3 * len(items)
