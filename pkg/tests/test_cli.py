"""Command-line surface: every subcommand drives the library end to end."""

import json

import pytest

from univa.cli import main

SMALL_INI = """\
[world]
catalog_size = 60
user_count = 12

[training]
sl_epochs = 2
joint_epochs = 2
requests_per_epoch = 8
probe_requests = 8
beam_width = 4
mcts_simulations = 4
batch_size = 8

[serving]
beam_width = 4
top_k = 5

[eval]
cutoffs = 1,3,5

[pipeline]
requests = 40
"""


@pytest.fixture(scope="module")
def small_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(SMALL_INI)
    return str(path)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, small_ini):
    out = tmp_path_factory.mktemp("exp")
    code = main(["pipeline", "--config", small_ini, "--seed", "0",
                 "--out", str(out)])
    assert code == 0
    return out


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def test_pipeline_reports_stage_statuses(pipeline_dir, small_ini, capsys):
    code = main(["pipeline", "--config", small_ini, "--seed", "0",
                 "--out", str(pipeline_dir)])
    captured = capsys.readouterr().out
    assert code == 0
    for stage in ("world", "tokenizer", "model", "train", "serve", "eval"):
        assert f"{stage}: skipped" in captured


def test_world_generate(tmp_path, small_ini, capsys):
    out = tmp_path / "w"
    code = main(["world", "generate", "--config", small_ini, "--seed", "0",
                 "--out", str(out), "--requests", "5"])
    assert code == 0
    assert "wrote 60 items, 12 users, 5 requests" in capsys.readouterr().out
    assert len(read_jsonl(out / "catalog.jsonl")) == 60
    assert len(read_jsonl(out / "users.jsonl")) == 12
    assert len(read_jsonl(out / "requests.jsonl")) == 5
    meta = json.loads((out / "meta.json").read_text())
    assert meta["catalog_size"] == 60


def test_tokenizer_fit_encode_stats(tmp_path, small_ini, capsys):
    world_dir = tmp_path / "w"
    main(["world", "generate", "--config", small_ini, "--seed", "0",
          "--out", str(world_dir)])
    tok_path = tmp_path / "tok.json"
    code = main(["tokenizer", "fit", "--config", small_ini, "--seed", "0",
                 "--catalog", str(world_dir / "catalog.jsonl"),
                 "--out", str(tok_path)])
    assert code == 0
    assert "level vocab sizes" in capsys.readouterr().out

    paths_path = tmp_path / "paths.jsonl"
    code = main(["tokenizer", "encode",
                 "--catalog", str(world_dir / "catalog.jsonl"),
                 "--tokenizer", str(tok_path), "--out", str(paths_path)])
    assert code == 0
    rows = read_jsonl(paths_path)
    assert len(rows) == 60
    assert all(len(r["path"]) >= 2 for r in rows)

    stats_path = tmp_path / "stats.json"
    code = main(["tokenizer", "stats",
                 "--catalog", str(world_dir / "catalog.jsonl"),
                 "--tokenizer", str(tok_path), "--out", str(stats_path)])
    assert code == 0
    stats = json.loads(stats_path.read_text())
    assert stats["items"] == 60
    assert len(stats["level_vocab_sizes"]) == len(rows[0]["path"])
    assert "std" in stats["dispersion"]


def test_model_init_and_inspect(tmp_path, small_ini, capsys):
    world_dir = tmp_path / "w"
    main(["world", "generate", "--config", small_ini, "--seed", "0",
          "--out", str(world_dir)])
    tok_path = tmp_path / "tok.json"
    main(["tokenizer", "fit", "--config", small_ini, "--seed", "0",
          "--catalog", str(world_dir / "catalog.jsonl"),
          "--out", str(tok_path)])
    meta = json.loads((world_dir / "meta.json").read_text())
    capsys.readouterr()

    ckpt = tmp_path / "model.npz"
    code = main(["model", "init", "--config", small_ini, "--seed", "0",
                 "--tokenizer", str(tok_path),
                 "--context-vocab", str(meta["context_vocab_size"]),
                 "--out", str(ckpt)])
    assert code == 0
    assert "parameters" in capsys.readouterr().out

    code = main(["model", "inspect", "--checkpoint", str(ckpt)])
    assert code == 0
    info = json.loads(capsys.readouterr().out)
    assert info["parameters"] > 0
    assert info["config"]["context_vocab_size"] == meta["context_vocab_size"]


def test_train_stops_after_training(tmp_path, small_ini, capsys):
    out = tmp_path / "t"
    code = main(["train", "--config", small_ini, "--seed", "1",
                 "--out", str(out)])
    captured = capsys.readouterr().out
    assert code == 0
    assert "train: ran" in captured
    assert "serve" not in captured
    assert (out / "train" / "log.csv").exists()
    assert not (out / "serve").exists()


def test_serve_emits_rankings_and_stats_line(pipeline_dir, tmp_path, capsys):
    rankings = tmp_path / "rankings.jsonl"
    code = main(["serve",
                 "--catalog", str(pipeline_dir / "world" / "catalog.jsonl"),
                 "--checkpoint",
                 str(pipeline_dir / "train" / "checkpoint_final.npz"),
                 "--tokenizer",
                 str(pipeline_dir / "tokenizer" / "tokenizer.json"),
                 "--requests",
                 str(pipeline_dir / "world" / "requests.jsonl"),
                 "--beam", "4", "--topk", "5", "--out", str(rankings)])
    captured = capsys.readouterr().out
    assert code == 0
    assert "valid paths with trie" in captured
    assert "without trie" in captured
    rows = read_jsonl(rankings)
    assert len(rows) == 40
    for row in rows[:3]:
        assert all(isinstance(i, int) for i, _ in row["items"])
        scores = [s for _, s in row["items"]]
        assert scores == sorted(scores, reverse=True)


def test_serve_no_trie_flag(pipeline_dir, tmp_path, capsys):
    rankings = tmp_path / "unconstrained.jsonl"
    code = main(["serve",
                 "--catalog", str(pipeline_dir / "world" / "catalog.jsonl"),
                 "--checkpoint",
                 str(pipeline_dir / "train" / "checkpoint_final.npz"),
                 "--tokenizer",
                 str(pipeline_dir / "tokenizer" / "tokenizer.json"),
                 "--requests",
                 str(pipeline_dir / "world" / "requests.jsonl"),
                 "--beam", "4", "--topk", "5", "--no-trie",
                 "--out", str(rankings)])
    assert code == 0
    assert "valid paths with trie" in capsys.readouterr().out
    assert rankings.exists()


def test_serve_rejects_requests_from_mismatched_world(pipeline_dir, tmp_path,
                                                      capsys):
    # requests from a default-size world carry context tokens beyond the
    # small checkpoint's vocabulary; that must be a named error, not a crash
    other = tmp_path / "other"
    assert main(["world", "generate", "--seed", "3", "--out", str(other),
                 "--requests", "10"]) == 0
    capsys.readouterr()
    code = main(["serve",
                 "--catalog", str(pipeline_dir / "world" / "catalog.jsonl"),
                 "--checkpoint",
                 str(pipeline_dir / "train" / "checkpoint_final.npz"),
                 "--tokenizer",
                 str(pipeline_dir / "tokenizer" / "tokenizer.json"),
                 "--requests", str(other / "requests.jsonl"),
                 "--beam", "4", "--topk", "5",
                 "--out", str(tmp_path / "r.jsonl")])
    assert code == 1
    assert "context vocabulary" in capsys.readouterr().err


def test_eval_reproduces_pipeline_metrics(pipeline_dir, tmp_path):
    out = tmp_path / "metrics.csv"
    code = main(["eval",
                 "--pred", str(pipeline_dir / "serve" / "rankings.jsonl"),
                 "--truth", str(pipeline_dir / "serve" / "truth.jsonl"),
                 "--cutoffs", "1,3,5", "--out", str(out)])
    assert code == 0
    assert out.read_bytes() == \
        (pipeline_dir / "eval" / "metrics.csv").read_bytes()


def test_eval_prints_csv_without_out(pipeline_dir, capsys):
    code = main(["eval",
                 "--pred", str(pipeline_dir / "serve" / "rankings.jsonl"),
                 "--truth", str(pipeline_dir / "serve" / "truth.jsonl"),
                 "--cutoffs", "1,3"])
    captured = capsys.readouterr().out.strip().splitlines()
    assert code == 0
    assert captured[0] == "cutoff,hr,value_hr,wndcg"
    assert len(captured) == 3


def test_bad_config_key_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[world]\nbadkey = 3\n")
    code = main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "unknown key" in capsys.readouterr().err


def test_stage_failure_exits_nonzero_with_stage_name(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL_INI + "\n[tokenizer]\nbudget = 1\n")
    code = main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "tokenizer" in capsys.readouterr().err
