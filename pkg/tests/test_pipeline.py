"""End-to-end runner: determinism, stage skipping, failure isolation."""

import csv
import json
import tempfile
import time

import pytest

from univa.config import default_config
from univa.pipeline import (
    STAGES,
    StageFailure,
    run_pipeline,
    samples_from_files,
    split_requests,
)
from univa.simulator import WorldConfig, generate_requests, generate_world


def small_config(seed=0):
    cfg = default_config(seed)
    cfg.world.catalog_size = 60
    cfg.world.user_count = 12
    cfg.pipeline.requests = 40
    cfg.training.sl_epochs = 2
    cfg.training.joint_epochs = 2
    cfg.training.requests_per_epoch = 8
    cfg.training.probe_requests = 8
    cfg.training.beam_width = 4
    cfg.training.mcts_simulations = 4
    cfg.training.batch_size = 8
    cfg.serving.beam_width = 4
    cfg.serving.top_k = 5
    cfg.eval.cutoffs = (1, 3, 5)
    return cfg


COMPARED_ARTIFACTS = (
    "train/log.csv",
    "serve/rankings.jsonl",
    "serve/truth.jsonl",
    "eval/metrics.csv",
    "eval/strategy_grid.csv",
    "eval/ablation.csv",
)


@pytest.fixture(scope="module")
def base_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    result = run_pipeline(small_config(), str(out))
    return out, result


def test_all_stages_ran(base_run):
    _, result = base_run
    assert result["status"] == {s: "ran" for s in STAGES}


def test_expected_artifacts_exist(base_run):
    out, _ = base_run
    for rel in COMPARED_ARTIFACTS + ("resolved.ini", "world/catalog.jsonl",
                                     "world/requests.jsonl",
                                     "tokenizer/tokenizer.json",
                                     "model/model_init.npz",
                                     "train/checkpoint_final.npz",
                                     "train/checkpoint_sl.npz",
                                     "serve/validity.json",
                                     "eval/dispersion.json",
                                     "eval/validity.json"):
        assert (out / rel).exists(), rel


def test_rerun_skips_every_stage(base_run):
    out, _ = base_run
    again = run_pipeline(small_config(), str(out))
    assert again["status"] == {s: "skipped" for s in STAGES}


def test_fresh_run_is_byte_identical(base_run, tmp_path):
    out, _ = base_run
    run_pipeline(small_config(), str(tmp_path))
    for rel in COMPARED_ARTIFACTS:
        assert (tmp_path / rel).read_bytes() == (out / rel).read_bytes(), rel


def test_training_log_columns(base_run):
    out, _ = base_run
    with open(out / "train" / "log.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["epoch", "sl_loss", "mean_ecpm_top1", "kl",
                             "expert_load_imbalance"]
    assert len(rows) == 4  # sl_epochs + joint_epochs


def test_ablation_table_covers_both_variants(base_run):
    out, _ = base_run
    with open(out / "eval" / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    assert {r["variant"] for r in rows} == {"sl_only", "joint"}
    assert len(rows) == 2 * 3  # two variants x three cutoffs


def test_metrics_csv_covers_cutoffs(base_run):
    out, _ = base_run
    with open(out / "eval" / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["cutoff"]) for r in rows] == [1, 3, 5]
    for row in rows:
        for col in ("hr", "value_hr", "wndcg"):
            assert 0.0 <= float(row[col]) <= 1.0


def test_changed_downstream_section_reruns_only_downstream(tmp_path):
    cfg = small_config()
    run_pipeline(cfg, str(tmp_path))
    cfg2 = small_config()
    cfg2.serving.top_k = 4
    again = run_pipeline(cfg2, str(tmp_path))
    assert again["status"] == {"world": "skipped", "tokenizer": "skipped",
                               "model": "skipped", "train": "skipped",
                               "serve": "ran", "eval": "ran"}


def test_until_stops_after_named_stage(tmp_path):
    cfg = small_config()
    result = run_pipeline(cfg, str(tmp_path), until="train")
    assert list(result["status"]) == ["world", "tokenizer", "model", "train"]
    assert not (tmp_path / "serve").exists()


def test_until_rejects_unknown_stage(tmp_path):
    with pytest.raises(ValueError, match="unknown stage"):
        run_pipeline(small_config(), str(tmp_path), until="bogus")


def test_failing_stage_named_and_upstream_preserved(tmp_path):
    cfg = small_config()
    cfg.tokenizer.budget = 1  # below |keys| * n_min, fit must fail
    with pytest.raises(StageFailure) as exc:
        run_pipeline(cfg, str(tmp_path))
    assert exc.value.stage == "tokenizer"
    assert "tokenizer" in str(exc.value)
    assert (tmp_path / "world" / "catalog.jsonl").exists()


def test_no_ablation_without_joint_phase(tmp_path):
    cfg = small_config()
    cfg.training.joint_epochs = 0
    result = run_pipeline(cfg, str(tmp_path))
    assert result["status"]["eval"] == "ran"
    assert not (tmp_path / "eval" / "ablation.csv").exists()


def test_split_requests_is_seeded_80_20():
    world = generate_world(WorldConfig(seed=0, catalog_size=30, user_count=8))
    reqs = generate_requests(world, 25, seed=1)
    a_train, a_test = split_requests(reqs, seed=5)
    b_train, b_test = split_requests(reqs, seed=5)
    assert len(a_train) == 20 and len(a_test) == 5
    assert [r.id for r in a_train] == [r.id for r in b_train]
    assert [r.id for r in a_test] == [r.id for r in b_test]
    ids = {r.id for r in a_train} | {r.id for r in a_test}
    assert len(ids) == 25
    c_train, _ = split_requests(reqs, seed=6)
    assert [r.id for r in c_train] != [r.id for r in a_train]


def test_samples_from_files_pads_short_rankings(tmp_path):
    pred = tmp_path / "pred.jsonl"
    truth = tmp_path / "truth.jsonl"
    pred.write_text(json.dumps({"request_id": 1,
                                "items": [[10, 0.5], [11, 0.25]]}) + "\n")
    truth.write_text(
        json.dumps({"request_id": 1, "target_item": 11, "gmv": 3.0}) + "\n"
        + json.dumps({"request_id": 2, "target_item": 5, "gmv": 1.0}) + "\n")
    samples = samples_from_files(str(pred), str(truth), width=4)
    assert len(samples) == 2
    assert samples[0].ranked == [10, 11, -1, -1]
    assert samples[0].rank_of_target() == 2
    assert samples[1].ranked == [-1, -1, -1, -1]
    assert samples[1].rank_of_target() is None


def test_smoke_config_completes_quickly():
    cfg = small_config(seed=2)
    cfg.world.catalog_size = 100
    start = time.time()
    with tempfile.TemporaryDirectory() as d:
        run_pipeline(cfg, d)
    assert time.time() - start < 60.0
