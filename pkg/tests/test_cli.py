import json

import pytest

from ger.cli import main
from ger.hgan import attention_rows

SMALL = ["--dim", "8", "--max-len", "48", "--heads", "2", "--layers", "2", "--enc-heads", "2", "--epochs", "1", "--batch", "8"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    args = ["generate", "--out", str(out), "--train-entities", "20", "--eval-entities", "12"]
    assert main(args) == 0
    return out


def train_args(data_dir, out, *extra):
    return [
        "train",
        "--train-mentions", str(data_dir / "train_mentions.jsonl"),
        "--train-entities", str(data_dir / "train_entities.jsonl"),
        "--eval-mentions", str(data_dir / "eval_mentions.jsonl"),
        "--eval-entities", str(data_dir / "eval_entities.jsonl"),
        "--out", str(out),
        *SMALL,
        *extra,
    ]


def lines(path):
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]


def test_extract(tmp_path, data_dir):
    src = data_dir / "train_mentions.jsonl"
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["extract", "--input", str(src), "--output", str(a)]) == 0
    assert main(["extract", "--input", str(src), "--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes() and a.stat().st_size > 0

    plain = tmp_path / "plain.jsonl"
    plain.write_text(json.dumps({"id": "q", "title": "t", "description": "the red boat near the dock"}) + "\n")
    main(["extract", "--input", str(plain), "--output", str(tmp_path / "p.jsonl")])
    assert lines(tmp_path / "p.jsonl") == []

    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.warns(UserWarning, match="no records"):
        main(["extract", "--input", str(empty), "--output", str(tmp_path / "e.jsonl")])
    assert (tmp_path / "e.jsonl").read_text() == ""


def test_pipeline_end_to_end(tmp_path, data_dir, capsys):
    ckpt, index, res = tmp_path / "m.ckpt", tmp_path / "idx.bin", tmp_path / "res.jsonl"
    triplets = tmp_path / "tm.jsonl"
    assert main(["extract", "--input", str(data_dir / "train_mentions.jsonl"), "--output", str(triplets)]) == 0
    assert main(train_args(data_dir, ckpt, "--triplets", str(triplets), "--log", str(tmp_path / "log.jsonl"))) == 0
    epochs = [r for r in lines(tmp_path / "log.jsonl") if "mean_loss" in r]
    assert set(epochs[0]["validation"]) == {"R@1", "R@8"}
    assert main(["encode-entities", "--checkpoint", str(ckpt), "--entities", str(data_dir / "eval_entities.jsonl"), "--out", str(index)]) == 0
    assert main(["retrieve", "--checkpoint", str(ckpt), "--index", str(index), "--mentions", str(data_dir / "eval_mentions.jsonl"), "--k", "12", "--out", str(res)]) == 0
    capsys.readouterr()
    report = tmp_path / "eval.json"
    assert main(["eval", "--results", str(res), "--mentions", str(data_dir / "eval_mentions.jsonl"), "--k-list", "1,4,8,12", "--checkpoint", str(ckpt), "--out", str(report)]) == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["R@1", "R@4", "R@8", "R@12"]
    rep = json.loads(report.read_text())
    assert rep["recall"]["R@12"] == 1.0
    assert sum(b["count"] for b in rep["attention_buckets"]) == rep["mentions"]

    dump = tmp_path / "att.jsonl"
    assert main(["inspect-attention", "--checkpoint", str(ckpt), "--input", str(data_dir / "eval_mentions.jsonl"), "--out", str(dump), "--graph-out", str(tmp_path / "g.jsonl")]) == 0
    rows = lines(dump)
    assert rows and all(abs(t - 1.0) < 1e-9 for t in attention_rows(rows).values())

    # the training entities must not be indexed as an evaluation KB
    assert main(["encode-entities", "--checkpoint", str(ckpt), "--entities", str(data_dir / "train_entities.jsonl"), "--out", str(index)]) == 2


def test_train_refuses_overlap(tmp_path, data_dir, capsys):
    args = train_args(data_dir, tmp_path / "x.ckpt")
    args[args.index("--eval-entities") + 1] = str(data_dir / "train_entities.jsonl")
    assert main(args) == 2
    assert "appear in both" in capsys.readouterr().err
    assert not (tmp_path / "x.ckpt").exists()


def test_train_is_deterministic(tmp_path, data_dir):
    for name in ("a", "b"):
        assert main(train_args(data_dir, tmp_path / f"{name}.ckpt", "--log", str(tmp_path / f"{name}.jsonl"), "--ratio", "0.5")) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_sentence_only_flag(tmp_path, data_dir):
    assert main(train_args(data_dir, tmp_path / "s.ckpt", "--mode", "sentence_only")) == 0
    from ger.training import load_model

    model, _ = load_model(tmp_path / "s.ckpt")
    assert (model.cfg.mode_mention, model.cfg.mode_entity) == ("sentence_only", "sentence_only")


def test_ablate_tables(tmp_path, data_dir, capsys):
    out = tmp_path / "ablate.json"
    assert main(["ablate", "--data-dir", str(data_dir), "--k-list", "1,8", "--out", str(out), *SMALL]) == 0
    tables = json.loads(out.read_text())
    assert [r["mode"] for r in tables["modes"]] == ["fused", "sentence_only", "graph_only", "node_mean", "flat_gat"]
    assert [(r["mention"], r["entity"]) for r in tables["sides"]] == [
        ("sentence_only", "sentence_only"),
        ("sentence_only", "fused"),
        ("fused", "sentence_only"),
        ("fused", "fused"),
    ]
    text = capsys.readouterr().out
    assert "R@1" in text and "R@8" in text
