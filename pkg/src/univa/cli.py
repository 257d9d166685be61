"""Command-line entry points.

Subcommands mirror the stage pipeline: `world`, `tokenizer`, `model`,
`train`, `serve`, `eval`, and `pipeline` (all stages in one run). The
`--seed`, `--config`, and `--out` flags mean the same thing everywhere; a
missing `--config` falls back to the built-in desk-scale defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .catalog import load_catalog, save_catalog
from .config import (
    SEED_OFFSETS,
    ServingSettings,
    build_model_config,
    default_config,
    load_config,
)
from .evaluation import trie_validity_report
from .model import DualHeadDecoder, load_checkpoint, save_checkpoint
from .pipeline import (
    StageFailure,
    metric_rows,
    run_pipeline,
    samples_from_files,
    validity_stats_line,
    write_metrics_csv,
    write_rankings,
)
from .simulator import (
    generate_requests,
    generate_world,
    load_requests,
    save_requests,
    save_users,
)
from .tokenizer import (
    fit_tokenizer,
    load_tokenizer,
    path_dispersion_stats,
    save_tokenizer,
    tokenize,
)


def _load_cfg(args):
    if getattr(args, "config", None):
        return load_config(args.config, seed=args.seed)
    return default_config(0 if args.seed is None else args.seed)


def _write_json_line(path, payload):
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        print(text, end="")


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def cmd_world_generate(args) -> int:
    cfg = _load_cfg(args)
    world = generate_world(cfg.world)
    os.makedirs(args.out, exist_ok=True)
    save_catalog(world.catalog, os.path.join(args.out, "catalog.jsonl"))
    save_users(world.users, os.path.join(args.out, "users.jsonl"))
    n_req = 0
    if args.requests:
        reqs = generate_requests(world, args.requests,
                                 seed=cfg.pipeline.seed + 17)
        save_requests(reqs, os.path.join(args.out, "requests.jsonl"))
        n_req = len(reqs)
    _write_json_line(os.path.join(args.out, "meta.json"),
                     {"context_vocab_size": world.context_vocab_size,
                      "catalog_size": len(world.catalog)})
    print(f"wrote {len(world.catalog)} items, {len(world.users)} users, "
          f"{n_req} requests to {args.out}")
    return 0


def cmd_tokenizer_fit(args) -> int:
    cfg = _load_cfg(args)
    catalog = load_catalog(args.catalog)
    tok = fit_tokenizer(catalog, cfg.tokenizer)
    save_tokenizer(tok, args.out)
    print(f"level vocab sizes: {tok.level_vocab_sizes()}")
    return 0


def cmd_tokenizer_encode(args) -> int:
    catalog = load_catalog(args.catalog)
    tok = load_tokenizer(args.tokenizer)
    with open(args.out, "w") as f:
        for item in catalog:
            f.write(json.dumps({"id": item.id,
                                "path": list(tokenize(item, tok))}) + "\n")
    print(f"encoded {len(catalog)} items to {args.out}")
    return 0


def cmd_tokenizer_stats(args) -> int:
    catalog = load_catalog(args.catalog)
    tok = load_tokenizer(args.tokenizer)
    stats = path_dispersion_stats(catalog, tok)
    _write_json_line(args.out, {
        "level_vocab_sizes": list(tok.level_vocab_sizes()),
        "items": len(catalog),
        "dispersion": stats,
    })
    return 0


def cmd_model_init(args) -> int:
    cfg = _load_cfg(args)
    tok = load_tokenizer(args.tokenizer)
    mc = build_model_config(cfg.model, tok.level_vocab_sizes(),
                            args.context_vocab)
    model = DualHeadDecoder(mc)
    save_checkpoint(model, args.out)
    print(f"initialized model ({model.describe()['parameters']} parameters) "
          f"at {args.out}")
    return 0


def cmd_model_inspect(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    info = model.describe()
    if extra:
        info["extra"] = extra
    print(json.dumps(info, sort_keys=True, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    result = run_pipeline(cfg, args.out, quiet=False, until="train")
    for stage, state in result["status"].items():
        print(f"{stage}: {state}")
    return 0


def cmd_serve(args) -> int:
    catalog = load_catalog(args.catalog)
    tok = load_tokenizer(args.tokenizer)
    model, _ = load_checkpoint(args.checkpoint)
    requests = load_requests(args.requests)
    serving = ServingSettings(beam_width=args.beam, top_k=args.topk,
                              use_trie=not args.no_trie)
    write_rankings(model, catalog, tok, requests, serving, args.out)
    report = trie_validity_report(model, catalog, tok, requests, args.beam)
    print(validity_stats_line(report))
    return 0


def cmd_eval(args) -> int:
    cutoffs = tuple(int(x) for x in args.cutoffs.split(","))
    samples = samples_from_files(args.pred, args.truth, max(cutoffs))
    rows = metric_rows(samples, cutoffs)
    if args.out:
        write_metrics_csv(rows, args.out)
    else:
        print("cutoff,hr,value_hr,wndcg")
        for r in rows:
            print(f"{r['cutoff']},{r['hr']:.10g},{r['value_hr']:.10g},"
                  f"{r['wndcg']:.10g}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    result = run_pipeline(cfg, args.out, quiet=False, until=args.until)
    for stage, state in result["status"].items():
        print(f"{stage}: {state}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p, out_required=True, out_help="output path"):
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the global seed")
    p.add_argument("--out", required=out_required, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="univa",
        description="Value-aligned generative ad retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    world = sub.add_parser("world", help="synthetic world artifacts")
    wsub = world.add_subparsers(dest="subcommand", required=True)
    wgen = wsub.add_parser("generate", help="emit catalog/users JSONL")
    _common(wgen, out_help="output directory")
    wgen.add_argument("--requests", type=int, default=0,
                      help="also emit this many serving requests")
    wgen.set_defaults(func=cmd_world_generate)

    tok = sub.add_parser("tokenizer", help="semantic-id tokenizer")
    tsub = tok.add_subparsers(dest="subcommand", required=True)
    tfit = tsub.add_parser("fit", help="fit tokenizer on a catalog")
    _common(tfit, out_help="tokenizer JSON output path")
    tfit.add_argument("--catalog", required=True, help="catalog JSONL")
    tfit.set_defaults(func=cmd_tokenizer_fit)
    tenc = tsub.add_parser("encode", help="encode catalog items to paths")
    tenc.add_argument("--catalog", required=True, help="catalog JSONL")
    tenc.add_argument("--tokenizer", required=True, help="fitted tokenizer")
    tenc.add_argument("--out", required=True, help="paths JSONL output")
    tenc.set_defaults(func=cmd_tokenizer_encode)
    tstat = tsub.add_parser("stats", help="vocabulary and dispersion stats")
    tstat.add_argument("--catalog", required=True, help="catalog JSONL")
    tstat.add_argument("--tokenizer", required=True, help="fitted tokenizer")
    tstat.add_argument("--out", default=None, help="JSON output (else stdout)")
    tstat.set_defaults(func=cmd_tokenizer_stats)

    model = sub.add_parser("model", help="decoder checkpoints")
    msub = model.add_subparsers(dest="subcommand", required=True)
    minit = msub.add_parser("init", help="initialize a fresh checkpoint")
    _common(minit, out_help="checkpoint output path")
    minit.add_argument("--tokenizer", required=True, help="fitted tokenizer")
    minit.add_argument("--context-vocab", type=int, required=True,
                       help="context vocabulary size of the request encoder")
    minit.set_defaults(func=cmd_model_init)
    minsp = msub.add_parser("inspect", help="print checkpoint description")
    minsp.add_argument("--checkpoint", required=True)
    minsp.set_defaults(func=cmd_model_inspect)

    train = sub.add_parser("train", help="run stages through training")
    _common(train, out_help="experiment directory")
    train.set_defaults(func=cmd_train)

    serve = sub.add_parser("serve", help="rank requests with a checkpoint")
    serve.add_argument("--catalog", required=True, help="catalog JSONL")
    serve.add_argument("--checkpoint", required=True)
    serve.add_argument("--tokenizer", required=True, help="fitted tokenizer")
    serve.add_argument("--requests", required=True, help="requests JSONL")
    serve.add_argument("--beam", type=int, default=8, help="beam width")
    serve.add_argument("--topk", type=int, default=10, help="items returned")
    serve.add_argument("--no-trie", action="store_true",
                       help="decode without the valid-path trie")
    serve.add_argument("--out", required=True, help="rankings JSONL output")
    serve.set_defaults(func=cmd_serve)

    ev = sub.add_parser("eval", help="ranking metrics from files")
    ev.add_argument("--pred", required=True, help="rankings JSONL")
    ev.add_argument("--truth", required=True, help="truth JSONL")
    ev.add_argument("--cutoffs", default="1,10,32,50,100",
                    help="comma-separated K values")
    ev.add_argument("--out", default=None, help="CSV output (else stdout)")
    ev.set_defaults(func=cmd_eval)

    pipe = sub.add_parser("pipeline", help="run every stage end to end")
    _common(pipe, out_help="experiment directory")
    pipe.add_argument("--until", default="eval",
                      help="stop after this stage (default: eval)")
    pipe.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageFailure as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
