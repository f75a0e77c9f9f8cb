"""Benchmark tables and static plots built from per-run records."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .experiments import ResultCell, format_mean_std, rank_models

POLICY_SUFFIX = {"native": "", "median-impute": "(imputed)"}


def _encoder(model: str) -> Optional[str]:
    head = model.split("-")[0]
    return head if head in ("TIME", "MLP") else None


def _scale(metric: str) -> float:
    return 100.0 if metric == "accuracy" else 1.0


def _fmt(mean: float, std: float, metric: str) -> str:
    if np.isnan(std):
        return f"{mean * _scale(metric):.2f}"
    return format_mean_std(mean, std, _scale(metric))


def _seeds(records: Sequence[Dict]) -> List[int]:
    return sorted({r["seed"] for r in records})


def _footer(config_hash: str, records: Sequence[Dict]) -> str:
    return f"config {config_hash[:16]} | seeds {_seeds(records)}"


def _metric_of(cells: Sequence[ResultCell], dataset: str) -> str:
    for c in cells:
        if c.dataset == dataset:
            return c.metric
    return "accuracy"


# ---------------------------------------------------------------------------
# benchmark table

def benchmark_rows(cells: Sequence[ResultCell]) -> List[Dict]:
    """Long-format rows: one per (mode, model, policy, dataset) plus encoder means.

    Mean rows average the per-seed-mean of each fusion variant of an encoder,
    separately for raw ("Mean") and imputed ("Mean(imputed)") inputs.
    """
    rows = []
    for c in cells:
        if c.ratio != 0:
            continue
        rows.append({"mode": c.mode, "model": c.model, "policy": c.policy, "dataset": c.dataset,
                     "metric": c.metric, "mean": c.mean, "std": c.std, "n": len(c.scores),
                     "kind": "cell"})
    groups: Dict[Tuple, List[float]] = defaultdict(list)
    for r in rows:
        enc = _encoder(r["model"])
        if enc is not None:
            groups[(r["mode"], enc, r["policy"], r["dataset"], r["metric"])].append(r["mean"])
    for (mode, enc, policy, dataset, metric), means in groups.items():
        rows.append({"mode": mode, "model": f"{enc}-Mean{POLICY_SUFFIX[policy]}", "policy": policy,
                     "dataset": dataset, "metric": metric, "mean": float(np.mean(means)),
                     "std": float("nan"), "n": len(means), "kind": "mean"})
    return rows


def _best_flags(rows: List[Dict]) -> None:
    """Mark the best non-mean cell per (mode, dataset) column."""
    cols: Dict[Tuple, List[Dict]] = defaultdict(list)
    for r in rows:
        r["best"] = False
        if r["kind"] == "cell":
            cols[(r["mode"], r["dataset"])].append(r)
    for col in cols.values():
        up = col[0]["metric"] == "accuracy"
        target = max(r["mean"] for r in col) if up else min(r["mean"] for r in col)
        for r in col:
            r["best"] = r["mean"] == target


def write_benchmark(cells: Sequence[ResultCell], records: Sequence[Dict], config_hash: str,
                    out_dir) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = benchmark_rows(cells)
    _best_flags(rows)
    seeds = " ".join(map(str, _seeds(records)))

    csv_path = out / "benchmark.csv"
    fields = ["config_hash", "seeds", "mode", "model", "policy", "dataset", "metric", "mean", "std",
              "n", "kind", "best", "rendered"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in sorted(rows, key=lambda r: (r["mode"], r["kind"], r["policy"], r["model"], r["dataset"])):
        w.writerow(dict(r, config_hash=config_hash, seeds=seeds,
                        rendered=_fmt(r["mean"], r["std"], r["metric"])))
    csv_path.write_text(buf.getvalue())

    md_path = out / "benchmark.md"
    md_path.write_text(render_table(rows, config_hash, records))
    return csv_path, md_path


def render_table(rows: List[Dict], config_hash: str, records: Sequence[Dict]) -> str:
    """Markdown table per mode; best cell per column in bold, mean rows in italics."""
    lines = [f"<!-- {_footer(config_hash, records)} -->", ""]
    datasets = sorted({r["dataset"] for r in rows})
    for mode in sorted({r["mode"] for r in rows}):
        sub = [r for r in rows if r["mode"] == mode]
        lines.append(f"### {mode}")
        lines.append("")
        header = ["Model"] + [f"{d} ({'Acc ↑' if _metric_of_rows(sub, d) == 'accuracy' else 'MSE ↓'})"
                              for d in datasets]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        # per encoder: raw fusions, raw mean, imputed fusions, imputed mean; baselines last
        order = sorted({(_encoder(r["model"]) or "~", r["policy"] != "native", r["kind"] == "mean",
                         r["model"], r["policy"]) for r in sub})
        for _, _, _, model, policy in order:
            label = model + ("" if policy == "native" or "Mean" in model else " (imputed)")
            cells = []
            for d in datasets:
                hit = [r for r in sub if r["model"] == model and r["policy"] == policy and r["dataset"] == d]
                if not hit:
                    cells.append("–")
                    continue
                r = hit[0]
                text = _fmt(r["mean"], r["std"], r["metric"])
                if r["kind"] == "mean":
                    text = f"*{text}*"
                elif r["best"]:
                    text = f"**{text}**"
                cells.append(text)
            lines.append("| " + " | ".join([label] + cells) + " |")
        lines.append("")
    lines.append(f"Scores are mean±std over seeds (std with N-1 denominator); "
                 f"{_footer(config_hash, records)}.")
    return "\n".join(lines) + "\n"


def _metric_of_rows(rows: Sequence[Dict], dataset: str) -> str:
    for r in rows:
        if r["dataset"] == dataset:
            return r["metric"]
    return "accuracy"


# ---------------------------------------------------------------------------
# plots

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_rankings(cells: Sequence[ResultCell], records: Sequence[Dict], config_hash: str,
                  path) -> Optional[Path]:
    """Mean rank across datasets per model, one panel per mode (ratio-0 cells only)."""
    plt = _pyplot()
    modes = sorted({c.mode for c in cells if c.ratio == 0})
    if not modes:
        return None
    fig, axes = plt.subplots(1, len(modes), figsize=(5 * len(modes), 4), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        sub = [c for c in cells if c.mode == mode and c.ratio == 0]
        models = sorted({(c.model, c.policy) for c in sub})
        datasets = sorted({c.dataset for c in sub})
        table = np.full((len(models), len(datasets)), np.nan)
        for c in sub:
            table[models.index((c.model, c.policy)), datasets.index(c.dataset)] = c.mean
        keep = ~np.isnan(table).any(axis=1)
        if not keep.any():
            continue
        table = table[keep]
        models = [m for m, k in zip(models, keep) if k]
        ranks = rank_models(table, [_metric_of(sub, d) == "accuracy" for d in datasets])
        mean_rank = ranks.mean(axis=1)
        order = np.argsort(mean_rank, kind="stable")
        labels = [models[i][0] + ("" if models[i][1] == "native" else " (imp.)") for i in order]
        ax.barh(labels[::-1], mean_rank[order][::-1], color="tab:blue")
        ax.set_xlabel("mean rank (1 = best)")
        ax.set_title(mode)
    fig.text(0.01, 0.01, _footer(config_hash, records), fontsize=7)
    fig.tight_layout(rect=(0, 0.04, 1, 1))
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_sensitivity(cells: Sequence[ResultCell], baselines: Sequence[ResultCell],
                     records: Sequence[Dict], config_hash: str, path) -> Path:
    """Metric vs masking ratio per model, with horizontal baseline reference lines."""
    plt = _pyplot()
    modes = sorted({c.mode for c in cells})
    datasets = sorted({c.dataset for c in cells})
    fig, axes = plt.subplots(len(datasets), len(modes), figsize=(5 * len(modes), 4 * len(datasets)),
                             squeeze=False)
    styles = ["--", ":", "-."]
    for i, d in enumerate(datasets):
        for j, mode in enumerate(modes):
            ax = axes[i][j]
            sub = [c for c in cells if c.mode == mode and c.dataset == d]
            scale = _scale(_metric_of(sub, d))
            for model in sorted({c.model for c in sub}):
                pts = sorted((c.ratio, c.mean * scale, c.std * scale) for c in sub if c.model == model)
                xs, ys, es = (np.array(v) for v in zip(*pts))
                ax.errorbar(xs, ys, yerr=np.nan_to_num(es), marker="o", capsize=3, label=model)
            refs = [b for b in baselines if b.mode == mode and b.dataset == d]
            for k, b in enumerate(sorted(refs, key=lambda b: b.model)):
                ax.axhline(b.mean * scale, linestyle=styles[k % len(styles)], color="gray",
                           label=f"{b.model} (complete)")
            ax.set_xlabel("masking ratio")
            ax.set_ylabel("accuracy (%)" if scale == 100 else "MSE")
            ax.set_title(f"{d} / {mode}")
            ax.legend(fontsize=7)
    fig.text(0.01, 0.01, _footer(config_hash, records), fontsize=7)
    fig.tight_layout(rect=(0, 0.04, 1, 1))
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_raw_vs_imputed(cells: Sequence[ResultCell], records: Sequence[Dict], config_hash: str,
                        path) -> Optional[Path]:
    """Paired bars for models evaluated under both missing-value policies."""
    plt = _pyplot()
    native = {(c.model, c.dataset, c.mode, c.ratio): c for c in cells if c.policy == "native"}
    imputed = {(c.model, c.dataset, c.mode, c.ratio): c for c in cells if c.policy == "median-impute"}
    pairs = sorted(set(native) & set(imputed))
    if not pairs:
        return None
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(pairs)), 4))
    x = np.arange(len(pairs))
    scale = _scale(native[pairs[0]].metric)
    for off, src, label in ((-0.2, native, "raw (native missing)"), (0.2, imputed, "median-imputed")):
        ax.bar(x + off, [src[p].mean * scale for p in pairs], width=0.4,
               yerr=[np.nan_to_num(src[p].std * scale) for p in pairs], capsize=3, label=label)
    ax.set_xticks(x, [f"{m}\n{d}/{mode}/r{r:g}" for m, d, mode, r in pairs], fontsize=7)
    ax.set_ylabel("accuracy (%)" if scale == 100 else "MSE")
    ax.legend(fontsize=8)
    fig.text(0.01, 0.01, _footer(config_hash, records), fontsize=7)
    fig.tight_layout(rect=(0, 0.05, 1, 1))
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
