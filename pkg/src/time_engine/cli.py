"""Command-line entry point: ``time {train,benchmark,sweep-missingness,cache-embeddings,evaluate}``.

Exit status is 0 iff every scheduled run succeeded; configuration and input
errors exit with 2 before any training starts.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .cache import CACHE_ENV, EmbeddingCache
from .config import ConfigError, ExperimentConfig, MaskConfig
from .datamodel import CLASSIFICATION
from .experiments import (ProtocolResult, ResultCell, _parse_model, checkpoint_config, collect_cells,
                          expand_runs, load_dataset, prepare_run, run_name, run_protocol)
from .train import load_checkpoint, score

logger = logging.getLogger("time_engine")

SWEEP_RATIOS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]


class InputError(RuntimeError):
    pass


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "sweep_default", False):
        raw = json.loads(Path(args.config).read_text())
        if "ratios" not in raw.get("mask", {}):
            cfg.mask = dataclasses.replace(cfg.mask, ratios=list(SWEEP_RATIOS))
    if args.out:
        cfg.output_dir = args.out
    if args.strict_probe:
        cfg.strict_probe = True
    return cfg


def _preflight(cfg: ExperimentConfig) -> None:
    """Resolve every dataset (manifest, images) before scheduling runs."""
    for i, spec in enumerate(cfg.datasets):
        try:
            load_dataset(spec)
        except FileNotFoundError as exc:
            msg = f"file not found: {exc.filename}" if exc.filename else str(exc)
            raise InputError(f"datasets[{i}]: {msg}") from None
        except (ValueError, KeyError) as exc:
            raise InputError(f"datasets[{i}]: {exc}") from None


def _print_runs(result: ProtocolResult, out=None) -> None:
    out = out or sys.stdout
    for r in result.records:
        head = f"[{r['config_hash'][:12]}] seed {r['seed']} {r['dataset']} {r['model']} {r['mode']} " \
               f"{r['policy']} r={r['ratio']:g}"
        if r["error"]:
            print(f"{head}: FAILED {r['error']}", file=out)
        else:
            print(f"{head}: {r['metric']}={r['value']:.4f} best_epoch={r['best_epoch']} "
                  f"({r['runtime']:.1f}s)", file=out)


def _print_cells(cells: Sequence[ResultCell], config_hash: str, out=None) -> None:
    out = out or sys.stdout
    for c in cells:
        print(f"[{config_hash[:12]}] {c.dataset} {c.model} {c.mode} {c.policy} r={c.ratio:g}: "
              f"{c.render()} ({c.metric}, seeds={len(c.scores)})", file=out)


def _summary(cfg: ExperimentConfig, result: ProtocolResult, path: Path) -> None:
    cells = [dict(dataclasses.asdict(c), mean=c.mean, std=c.std if len(c.scores) > 1 else None)
             for c in result.cells]
    doc = {"config_hash": cfg.hash(), "seeds": cfg.seeds, "std_ddof": 1, "cells": cells,
           "failures": [{k: r[k] for k in ("dataset", "model", "mode", "policy", "ratio", "seed", "error")}
                        for r in result.failures]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _status(*results: ProtocolResult) -> int:
    n_failed = sum(len(r.failures) for r in results)
    if n_failed:
        print(f"{n_failed} run(s) failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = _load(args)
    _preflight(cfg)
    out = Path(cfg.output_dir)
    result = run_protocol(cfg, out, jobs=args.jobs)
    _print_runs(result)
    _print_cells(result.cells, cfg.hash())
    _summary(cfg, result, out / "summary.json")
    return _status(result)


def cmd_benchmark(args) -> int:
    from .report import plot_rankings, plot_raw_vs_imputed, write_benchmark

    cfg = _load(args)
    _preflight(cfg)
    out = Path(cfg.output_dir)
    result = run_protocol(cfg, out, jobs=args.jobs)
    _print_runs(result)
    h = cfg.hash()
    _summary(cfg, result, out / "summary.json")
    if result.cells:
        _, md = write_benchmark(result.cells, result.records, h, out)
        print(md.read_text())
        plot_rankings(result.cells, result.records, h, out / "rankings.png")
        plot_raw_vs_imputed(result.cells, result.records, h, out / "raw_vs_imputed.png")
    return _status(result)


def baseline_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Complete-data reference runs: image-only and the MLP-fused counterparts."""
    return dataclasses.replace(cfg, tabular_encoder=["mlp"], missing_policy=["median-impute"],
                               baselines=["image-only"], mask=MaskConfig(ratios=[0.0]))


def cmd_sweep(args) -> int:
    from .report import plot_sensitivity

    args.sweep_default = True
    cfg = _load(args)
    _preflight(cfg)
    for i, spec in enumerate(cfg.datasets):
        if load_dataset(spec)[0].task != CLASSIFICATION:
            raise InputError(f"datasets[{i}]: the missingness sweep needs a classification task")
    # baselines are flat reference lines, so they run once on complete data
    main = dataclasses.replace(cfg, baselines=[])
    out = Path(cfg.output_dir)
    result = run_protocol(main, out, jobs=args.jobs, results_name="sweep.jsonl")
    _print_runs(result)
    results = [result]
    h = main.hash()
    _print_cells(result.cells, h)
    refs: List[ResultCell] = []
    if not args.no_baselines:
        bcfg = baseline_config(cfg)
        base = run_protocol(bcfg, out, jobs=args.jobs, results_name="sweep_baselines.jsonl")
        _print_runs(base)
        _print_cells(base.cells, bcfg.hash())
        refs = base.cells
        results.append(base)
    _summary(main, result, out / "summary.json")
    if result.cells:
        plot_sensitivity(result.cells, refs, result.records, h, out / "sensitivity.png")
    return _status(*results)


def cmd_cache_embeddings(args) -> int:
    cfg = _load(args)
    _preflight(cfg)
    root = args.cache_dir or None
    cache = EmbeddingCache(root)
    if cache.root is None:
        cache = EmbeddingCache(Path(cfg.output_dir) / "cache")
    seen = set()
    failed = 0
    for spec in expand_runs(cfg):
        tabular, uses_images, _ = _parse_model(spec.model)
        if tabular != "pfn" and not (uses_images and spec.mode == "frozen"):
            continue
        key = (spec.dataset, tabular == "pfn", uses_images and spec.mode == "frozen", spec.policy,
               spec.ratio, spec.seed)
        if key in seen:
            continue
        seen.add(key)
        try:
            prep = prepare_run(cfg, spec, cache)
        except Exception as exc:
            failed += 1
            print(f"seed {spec.seed} {spec.model}: FAILED {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        print(f"[{cfg.hash()[:12]}] seed {spec.seed} {cfg.datasets[spec.dataset].label} "
              f"{spec.policy} r={spec.ratio:g}: {', '.join(sorted(prep.cache_keys))}")
    print(f"cache {cache.root}: {cache.misses} computed, {cache.hits} reused")
    return 1 if failed else 0


def cmd_evaluate(args) -> int:
    """Reload checkpoints written by train/benchmark and rescore the test split."""
    cfg = _load(args)
    _preflight(cfg)
    out = Path(cfg.output_dir)
    records: List[Dict] = []
    for spec in expand_runs(cfg):
        ckpt = out / "checkpoints" / run_name(cfg, spec)
        rec = {"config_hash": cfg.hash(), "dataset": cfg.datasets[spec.dataset].label, "model": spec.model,
               "mode": spec.mode, "policy": spec.policy, "ratio": spec.ratio, "seed": spec.seed,
               "metric": None, "value": None, "error": None}
        try:
            if not ckpt.exists():
                raise FileNotFoundError(f"no checkpoint at {ckpt}")
            prep = prepare_run(cfg, spec)
            meta = load_checkpoint(prep.model, ckpt, checkpoint_config(cfg, spec))
            rec.update(metric="accuracy" if prep.model.task == CLASSIFICATION else "mse",
                       value=score(prep.model, prep.test), best_epoch=meta["epoch"])
        except Exception as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluation.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    result = ProtocolResult(records, collect_cells(records))
    for r in records:
        head = f"[{r['config_hash'][:12]}] seed {r['seed']} {r['dataset']} {r['model']} {r['mode']} " \
               f"{r['policy']} r={r['ratio']:g}"
        print(f"{head}: FAILED {r['error']}" if r["error"] else f"{head}: {r['metric']}={r['value']:.4f}")
    _print_cells(result.cells, cfg.hash())
    return _status(result)


COMMANDS = {
    "train": (cmd_train, "train every configured model and seed; write checkpoints and run records"),
    "benchmark": (cmd_benchmark, "run the full grid and emit a table report, CSV and ranking plot"),
    "sweep-missingness": (cmd_sweep, "masking-ratio sweep with baseline reference lines"),
    "cache-embeddings": (cmd_cache_embeddings, f"precompute embeddings (location: --cache-dir, "
                                               f"${CACHE_ENV}, or OUT/cache)"),
    "evaluate": (cmd_evaluate, "rescore saved checkpoints on the test split"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="time", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--strict-probe", action="store_true",
                       help="frozen mode trains the linear head only")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name == "sweep-missingness":
            p.add_argument("--no-baselines", action="store_true",
                           help="skip the image-only / MLP reference runs")
        if name == "cache-embeddings":
            p.add_argument("--cache-dir", help="cache directory")
        p.set_defaults(func=fn)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
