"""End-to-end experiment runner.

Stages run in order: world -> tokenizer -> model -> train -> serve -> eval.
Each stage's outputs are content-addressed by a hash of its resolved settings
plus all upstream hashes; an unchanged stage with outputs on disk is skipped.
A failing stage aborts with its name while earlier outputs stay on disk.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os

import numpy as np
import torch

from .config import ExperimentConfig, build_model_config, save_resolved
from .evaluation import (
    EvalSample,
    dispersion_comparison,
    hr_at_k,
    strategy_grid,
    trie_validity_report,
    value_hr_at_k,
    wndcg_at_k,
)
from .model import DualHeadDecoder, load_checkpoint, save_checkpoint
from .serving import build_trie, personalize, retrieve
from .simulator import (
    PathIndex,
    generate_requests,
    generate_world,
    save_requests,
    save_users,
    targeting_filter,
)
from .catalog import save_catalog
from .tokenizer import fit_tokenizer, load_tokenizer, save_tokenizer
from .training import mean_ecpm_top1, train

STAGES = ("world", "tokenizer", "model", "train", "serve", "eval")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _settings_dict(obj) -> dict:
    import dataclasses

    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _stage_dir(out_dir, stage):
    d = os.path.join(out_dir, stage)
    os.makedirs(d, exist_ok=True)
    return d


def _stage_fresh(out_dir, stage, digest, artifacts) -> bool:
    meta = os.path.join(out_dir, stage, "stage.json")
    if not os.path.exists(meta):
        return False
    with open(meta) as f:
        recorded = json.load(f).get("hash")
    if recorded != digest:
        return False
    return all(os.path.exists(os.path.join(out_dir, stage, a))
               for a in artifacts)


def _mark_stage(out_dir, stage, digest):
    with open(os.path.join(out_dir, stage, "stage.json"), "w") as f:
        json.dump({"hash": digest}, f, sort_keys=True)
        f.write("\n")


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def split_requests(requests, seed: int):
    """Seeded 80/20 shuffle split."""
    order = np.random.default_rng(seed).permutation(len(requests))
    cut = int(round(0.8 * len(requests)))
    train_part = [requests[i] for i in order[:cut]]
    test_part = [requests[i] for i in order[cut:]]
    return train_part, test_part


def run_pipeline(cfg: ExperimentConfig, out_dir, quiet: bool = True,
                 until: str = "eval") -> dict:
    """Execute stages in order, stopping after ``until``.

    Returns per-stage status ("ran"/"skipped") and the output directory.
    """
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; expected one of {STAGES}")
    torch.set_num_threads(1)
    os.makedirs(out_dir, exist_ok=True)
    save_resolved(cfg, os.path.join(out_dir, "resolved.ini"))
    status = {}

    # ----- world ---------------------------------------------------------
    stage = "world"
    world_hash = _hash({"world": _settings_dict(cfg.world),
                        "requests": cfg.pipeline.requests,
                        "seed": cfg.pipeline.seed})
    world_dir = _stage_dir(out_dir, stage)
    world = generate_world(cfg.world)
    requests = generate_requests(world, cfg.pipeline.requests,
                                 seed=cfg.pipeline.seed + 17)
    try:
        if _stage_fresh(out_dir, stage, world_hash,
                        ("catalog.jsonl", "users.jsonl", "requests.jsonl")):
            status[stage] = "skipped"
        else:
            save_catalog(world.catalog, os.path.join(world_dir, "catalog.jsonl"))
            save_users(world.users, os.path.join(world_dir, "users.jsonl"))
            save_requests(requests, os.path.join(world_dir, "requests.jsonl"))
            _write_json(os.path.join(world_dir, "meta.json"),
                        {"context_vocab_size": world.context_vocab_size,
                         "catalog_size": len(world.catalog)})
            _mark_stage(out_dir, stage, world_hash)
            status[stage] = "ran"
    except StageFailure:
        raise
    except Exception as e:
        raise StageFailure(stage, e) from e
    if until == "world":
        return {"status": status, "out_dir": out_dir}

    # ----- tokenizer ------------------------------------------------------
    stage = "tokenizer"
    tok_hash = _hash({"upstream": world_hash,
                      "tokenizer": _settings_dict(cfg.tokenizer)})
    tok_dir = _stage_dir(out_dir, stage)
    tok_path = os.path.join(tok_dir, "tokenizer.json")
    try:
        if _stage_fresh(out_dir, stage, tok_hash, ("tokenizer.json",)):
            tokenizer = load_tokenizer(tok_path)
            status[stage] = "skipped"
        else:
            tokenizer = fit_tokenizer(world.catalog, cfg.tokenizer)
            save_tokenizer(tokenizer, tok_path)
            _mark_stage(out_dir, stage, tok_hash)
            status[stage] = "ran"
    except StageFailure:
        raise
    except Exception as e:
        raise StageFailure(stage, e) from e
    if until == "tokenizer":
        return {"status": status, "out_dir": out_dir}

    # ----- model ----------------------------------------------------------
    stage = "model"
    model_hash = _hash({"upstream": tok_hash,
                        "model": _settings_dict(cfg.model)})
    model_dir = _stage_dir(out_dir, stage)
    init_path = os.path.join(model_dir, "model_init.npz")
    try:
        if _stage_fresh(out_dir, stage, model_hash, ("model_init.npz",)):
            status[stage] = "skipped"
        else:
            mc = build_model_config(cfg.model, tokenizer.level_vocab_sizes(),
                                    world.context_vocab_size)
            model = DualHeadDecoder(mc)
            save_checkpoint(model, init_path)
            _mark_stage(out_dir, stage, model_hash)
            status[stage] = "ran"
    except StageFailure:
        raise
    except Exception as e:
        raise StageFailure(stage, e) from e
    if until == "model":
        return {"status": status, "out_dir": out_dir}

    # ----- train ----------------------------------------------------------
    stage = "train"
    train_hash = _hash({"upstream": model_hash,
                        "training": _settings_dict(cfg.training)})
    train_dir = _stage_dir(out_dir, stage)
    final_path = os.path.join(train_dir, "checkpoint_final.npz")
    sl_path = os.path.join(train_dir, "checkpoint_sl.npz")
    train_reqs, test_reqs = split_requests(requests, cfg.pipeline.seed + 31)
    try:
        artifacts = ["checkpoint_final.npz", "log.csv"]
        if cfg.training.sl_epochs > 0:
            artifacts.append("checkpoint_sl.npz")
        if _stage_fresh(out_dir, stage, train_hash, tuple(artifacts)):
            status[stage] = "skipped"
        else:
            model, _ = load_checkpoint(init_path)
            result = train(model, world, tokenizer, train_reqs, cfg.training,
                           log_path=os.path.join(train_dir, "log.csv"))
            save_checkpoint(model, final_path)
            if result.sl_state is not None:
                snap = copy.deepcopy(model)
                snap.load_state_dict(result.sl_state)
                save_checkpoint(snap, sl_path)
            _mark_stage(out_dir, stage, train_hash)
            status[stage] = "ran"
    except StageFailure:
        raise
    except Exception as e:
        raise StageFailure(stage, e) from e
    if until == "train":
        return {"status": status, "out_dir": out_dir}

    # ----- serve ----------------------------------------------------------
    stage = "serve"
    serve_hash = _hash({"upstream": train_hash,
                        "serving": _settings_dict(cfg.serving)})
    serve_dir = _stage_dir(out_dir, stage)
    rankings_path = os.path.join(serve_dir, "rankings.jsonl")
    truth_path = os.path.join(serve_dir, "truth.jsonl")
    try:
        if _stage_fresh(out_dir, stage, serve_hash,
                        ("rankings.jsonl", "truth.jsonl", "validity.json")):
            status[stage] = "skipped"
        else:
            model, _ = load_checkpoint(final_path)
            serve_requests_to_files(model, world.catalog, tokenizer, test_reqs,
                                    cfg.serving, rankings_path, truth_path,
                                    os.path.join(serve_dir, "validity.json"),
                                    quiet=quiet)
            _mark_stage(out_dir, stage, serve_hash)
            status[stage] = "ran"
    except StageFailure:
        raise
    except Exception as e:
        raise StageFailure(stage, e) from e
    if until == "serve":
        return {"status": status, "out_dir": out_dir}

    # ----- eval -----------------------------------------------------------
    stage = "eval"
    eval_hash = _hash({"upstream": serve_hash,
                       "eval": _settings_dict(cfg.eval)})
    eval_dir = _stage_dir(out_dir, stage)
    try:
        artifacts = ["metrics.csv", "dispersion.json", "strategy_grid.csv",
                     "validity.json"]
        ablation = cfg.training.joint_epochs > 0 and cfg.training.sl_epochs > 0
        if ablation:
            artifacts.append("ablation.csv")
        if _stage_fresh(out_dir, stage, eval_hash, tuple(artifacts)):
            status[stage] = "skipped"
        else:
            _eval_stage(cfg, world, tokenizer, test_reqs, rankings_path,
                        final_path, sl_path if ablation else None,
                        serve_dir, eval_dir)
            _mark_stage(out_dir, stage, eval_hash)
            status[stage] = "ran"
    except StageFailure:
        raise
    except Exception as e:
        raise StageFailure(stage, e) from e

    return {"status": status, "out_dir": out_dir}


def write_rankings(model, catalog, tokenizer, requests, serving, path):
    """Rank every request and write one JSONL row of [item, score] pairs."""
    vocab = model.cfg.context_vocab_size
    for req in requests:
        worst = max(req.context_tokens, default=0)
        if worst >= vocab:
            raise ValueError(
                f"request {req.id} has context token {worst} outside the "
                f"model's context vocabulary ({vocab}); the requests were "
                "generated for a different world than this checkpoint")
    trie = build_trie(catalog, tokenizer)
    by_id = {it.id: it for it in catalog}
    model.eval()
    with open(path, "w") as f:
        for req in requests:
            eligible = targeting_filter(req, catalog)
            ptrie = personalize(trie, eligible)
            with torch.no_grad():
                h = model.encode(torch.tensor([req.context_tokens]))
            got = retrieve(model, h, trie, ptrie if serving.use_trie else None,
                           by_id, eligible, serving.beam_width, serving.top_k)
            row = {"request_id": req.id,
                   "items": [[int(i), float(f"{s:.10g}")] for i, s in got]}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def write_truth(catalog, requests, path):
    by_id = {it.id: it for it in catalog}
    with open(path, "w") as f:
        for req in requests:
            if req.target_item is None:
                continue
            f.write(json.dumps(
                {"request_id": req.id, "target_item": req.target_item,
                 "gmv": by_id[req.target_item].gmv}, sort_keys=True) + "\n")


def validity_stats_line(report) -> str:
    wt = sum(r.with_trie_valid for r in report.rows)
    wt_n = sum(r.with_trie_returned for r in report.rows)
    ft = sum(r.without_trie_valid for r in report.rows)
    ft_n = sum(r.without_trie_returned for r in report.rows)
    return f"valid paths with trie {wt}/{wt_n}, without trie {ft}/{ft_n}"


def serve_requests_to_files(model, catalog, tokenizer, requests, serving,
                            rankings_path, truth_path, validity_path,
                            quiet=True):
    write_rankings(model, catalog, tokenizer, requests, serving, rankings_path)
    write_truth(catalog, requests, truth_path)
    report = trie_validity_report(model, catalog, tokenizer, requests,
                                  serving.beam_width)
    payload = {
        "with_trie_fraction": report.with_trie_fraction,
        "without_trie_fraction": report.without_trie_fraction,
        "reference": report.reference,
        "rows": [vars(r) for r in report.rows],
    }
    _write_json(validity_path, payload)
    if not quiet:
        print(validity_stats_line(report))


def load_rankings(path) -> dict[int, list[int]]:
    out = {}
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            ranked = [i for i, _ in row["items"]] if "items" in row \
                else list(row["ranked"])
            out[row["request_id"]] = ranked
    return out


def _padded_samples(requests, rankings, by_id, width):
    samples = []
    for req in requests:
        if req.target_item is None:
            continue
        ranked = list(rankings.get(req.id, []))[:width]
        ranked += [-1] * (width - len(ranked))
        samples.append(EvalSample(request_id=req.id,
                                  target_item=req.target_item,
                                  gmv=by_id[req.target_item].gmv,
                                  ranked=ranked))
    return samples


def samples_from_files(pred_path, truth_path, width):
    """Join prediction and truth JSONL files into padded eval samples.

    Short ranked lists are right-padded with a -1 sentinel (never a real item
    id) so every sample has the uniform length the metrics require.
    """
    rankings = load_rankings(pred_path)
    samples = []
    with open(truth_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ranked = list(rankings.get(row["request_id"], []))[:width]
            ranked += [-1] * (width - len(ranked))
            samples.append(EvalSample(request_id=int(row["request_id"]),
                                      target_item=int(row["target_item"]),
                                      gmv=float(row["gmv"]),
                                      ranked=ranked))
    return samples


def metric_rows(samples, cutoffs):
    rows = []
    for k in cutoffs:
        rows.append({"cutoff": k, "hr": hr_at_k(samples, k),
                     "value_hr": value_hr_at_k(samples, k),
                     "wndcg": wndcg_at_k(samples, k)})
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cutoff", "hr", "value_hr", "wndcg"])
        for r in rows:
            w.writerow([r["cutoff"], f"{r['hr']:.10g}",
                        f"{r['value_hr']:.10g}", f"{r['wndcg']:.10g}"])


def _eval_stage(cfg, world, tokenizer, test_reqs, rankings_path, final_path,
                sl_ckpt_path, serve_dir, eval_dir):
    by_id = {it.id: it for it in world.catalog}
    width = max(max(cfg.eval.cutoffs), cfg.serving.top_k)
    rankings = load_rankings(rankings_path)
    samples = _padded_samples(test_reqs, rankings, by_id, width)
    write_metrics_csv(metric_rows(samples, cfg.eval.cutoffs),
                      os.path.join(eval_dir, "metrics.csv"))

    _write_json(os.path.join(eval_dir, "dispersion.json"),
                dispersion_comparison(world.catalog, tokenizer))

    grid = strategy_grid(world.catalog, cfg.tokenizer)
    with open(os.path.join(eval_dir, "strategy_grid.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["grouping", "binning", "H", "V"])
        for (g, b), cell in sorted(grid.items()):
            w.writerow([g, b, f"{cell['H']:.10g}", cell["V"]])

    with open(os.path.join(serve_dir, "validity.json")) as f:
        _write_json(os.path.join(eval_dir, "validity.json"), json.load(f))

    if sl_ckpt_path is not None:
        _ablation_table(cfg, world, tokenizer, test_reqs, final_path,
                        sl_ckpt_path, os.path.join(eval_dir, "ablation.csv"))


def _ablation_table(cfg, world, tokenizer, test_reqs, final_path, sl_path,
                    out_path):
    """Final joint checkpoint vs the SL-only snapshot on the held-out split."""
    by_id = {it.id: it for it in world.catalog}
    trie = build_trie(world.catalog, tokenizer)
    index = PathIndex.from_tokenizer(world.catalog, tokenizer)
    width = max(max(cfg.eval.cutoffs), cfg.serving.top_k)
    rows = []
    for variant, path in (("sl_only", sl_path), ("joint", final_path)):
        model, _ = load_checkpoint(path)
        model.eval()
        rankings = {}
        for req in test_reqs:
            eligible = targeting_filter(req, world.catalog)
            ptrie = personalize(trie, eligible)
            with torch.no_grad():
                h = model.encode(torch.tensor([req.context_tokens]))
            got = retrieve(model, h, trie, ptrie, by_id, eligible,
                           cfg.serving.beam_width, cfg.serving.top_k)
            rankings[req.id] = [i for i, _ in got]
        samples = _padded_samples(test_reqs, rankings, by_id, width)
        ecpm = mean_ecpm_top1(model, world, trie, index, test_reqs,
                              cfg.serving.beam_width)
        for m in metric_rows(samples, cfg.eval.cutoffs):
            rows.append({"variant": variant, **m, "mean_ecpm_top1": ecpm})
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "cutoff", "hr", "value_hr", "wndcg",
                    "mean_ecpm_top1"])
        for r in rows:
            w.writerow([r["variant"], r["cutoff"], f"{r['hr']:.10g}",
                        f"{r['value_hr']:.10g}", f"{r['wndcg']:.10g}",
                        f"{r['mean_ecpm_top1']:.10g}"])
