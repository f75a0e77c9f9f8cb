"""Protocol drivers: masking, metrics, multi-seed aggregation, rankings, run grid."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import traceback
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .cache import EmbeddingCache, cache_key
from .config import DatasetSpec, ExperimentConfig
from .datamodel import CLASSIFICATION, MultimodalDataset, split_dataset
from .encoders import ImageEncoder, MLPTabularEncoder, image_embed, preprocessing_info
from .ingest import Manifest, Normalizer, apply_imputer, fit_imputer, load_manifest, read_split_column
from .metrics import accuracy, mse
from .model import TIMEModel
from .pfn import ContextSet, PFNConfig, PFNWeights, load_weights, pfn_embed, pfn_embed_context
from .synthetic import make_synthetic_dataset
from .train import ModelInputs, RunRecord, TrainConfig, save_checkpoint, score, train_model

logger = logging.getLogger(__name__)

__all__ = [
    "MaskSpec", "ResultCell", "RunSpec", "accuracy", "aggregate_runs", "format_mean_std",
    "mask_mnar", "mask_tabular", "mse", "rank_models", "run_name", "run_protocol", "run_single",
]


# ---------------------------------------------------------------------------
# masking

@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    scope: str = "all-splits"
    seed: int = 0
    columns: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mask ratio {self.ratio} outside [0, 1]")


def mask_tabular(ds: MultimodalDataset, spec: MaskSpec) -> MultimodalDataset:
    """MCAR: mask round(ratio * N * d) more cells, uniformly among observed ones.

    With ``spec.columns`` the count is round(ratio * N * len(columns)) and
    only those columns are eligible.
    """
    cols = np.arange(ds.d) if spec.columns is None else np.asarray(spec.columns)
    target = int(round(spec.ratio * len(ds) * len(cols)))
    if target == 0:
        return ds
    missing = ds.missing.copy()
    eligible = np.zeros_like(missing)
    eligible[:, cols] = True
    observed = np.flatnonzero(eligible & ~missing)
    if target > len(observed):
        warnings.warn(f"ratio {spec.ratio} asks for {target} cells but only {len(observed)} are "
                      "observed; masking all of them")
        target = len(observed)
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(observed, size=target, replace=False)
    missing.flat[chosen] = True
    values = ds.values.copy()
    values[missing] = np.nan
    return ds.with_tabular(values, missing)


def mask_mnar(ds: MultimodalDataset, column: int, ratio: float, seed: int,
              strength: float = 3.0) -> MultimodalDataset:
    """Mask round(ratio * N) cells of one column, favouring large values.

    Cells are drawn without replacement with weights sigmoid(strength * z)
    where z is the column's standardized value.
    """
    obs = np.flatnonzero(~ds.missing[:, column])
    k = min(int(round(ratio * len(ds))), len(obs))
    if k == 0:
        return ds
    v = ds.values[obs, column]
    z = (v - v.mean()) / (v.std() or 1.0)
    w = 1.0 / (1.0 + np.exp(-strength * z))
    rng = np.random.default_rng(seed)
    rows = rng.choice(obs, size=k, replace=False, p=w / w.sum())
    missing = ds.missing.copy()
    missing[rows, column] = True
    values = ds.values.copy()
    values[missing] = np.nan
    return ds.with_tabular(values, missing)


# ---------------------------------------------------------------------------
# aggregation and ranking

def aggregate_runs(scores: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (N - 1 denominator)."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2:
        raise ValueError("need at least two scores to aggregate")
    return float(scores.mean()), float(scores.std(ddof=1))


def format_mean_std(mean: float, std: float, scale: float = 1.0, digits: int = 2) -> str:
    return f"{mean * scale:.{digits}f}±{std * scale:.{digits}f}"


def rank_models(table, higher_is_better: Sequence[bool]) -> np.ndarray:
    """Rank rows (models) within each column (dataset); ties share the mean rank."""
    from scipy.stats import rankdata

    table = np.asarray(table, dtype=np.float64)
    if np.isnan(table).any():
        raise ValueError("rank table has missing cells")
    ranks = np.empty_like(table)
    for j, up in enumerate(higher_is_better):
        col = -table[:, j] if up else table[:, j]
        ranks[:, j] = rankdata(col, method="average")
    return ranks


@dataclass
class ResultCell:
    model: str
    dataset: str
    mode: str
    policy: str = "native"
    ratio: float = 0.0
    metric: str = "accuracy"
    scores: List[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return aggregate_runs(self.scores)[1] if len(self.scores) > 1 else float("nan")

    def render(self) -> str:
        scale = 100.0 if self.metric == "accuracy" else 1.0
        return format_mean_std(self.mean, self.std, scale)


# ---------------------------------------------------------------------------
# a single run

@dataclass(frozen=True)
class RunSpec:
    dataset: int  # index into config.datasets
    model: str  # e.g. "TIME-Cat", "MLP-Max", "image-only"
    mode: str
    policy: str
    ratio: float
    seed: int

    def key(self) -> Tuple:
        return (self.model, self.mode, self.policy, self.ratio)


def model_ids(cfg: ExperimentConfig) -> List[str]:
    prefix = {"pfn": "TIME", "mlp": "MLP"}
    ids = [f"{prefix[t]}-{f.upper() if f == 'daft' else f.capitalize()}"
           for t in cfg.tabular_encoder for f in cfg.fusion]
    return ids + list(cfg.baselines)


def _parse_model(model_id: str) -> Tuple[Optional[str], bool, Optional[str]]:
    """-> (tabular encoder, uses images, fusion)."""
    if model_id == "image-only":
        return None, True, None
    if model_id in ("pfn-only", "mlp-only"):
        return model_id.split("-")[0], False, None
    enc, fusion = model_id.split("-")
    return {"TIME": "pfn", "MLP": "mlp"}[enc], True, fusion.lower()


def expand_runs(cfg: ExperimentConfig) -> List[RunSpec]:
    runs = []
    for di in range(len(cfg.datasets)):
        for model in model_ids(cfg):
            for mode in cfg.mode:
                # image-only never sees the table, so one policy suffices
                policies = cfg.missing_policy[:1] if model == "image-only" else cfg.missing_policy
                for policy in policies:
                    for ratio in cfg.mask.ratios:
                        for seed in cfg.seeds:
                            runs.append(RunSpec(di, model, mode, policy, ratio, seed))
    return runs


_DATASETS: Dict[str, Tuple[MultimodalDataset, object]] = {}
_PFN: Dict[Optional[str], PFNWeights] = {}


def load_dataset(spec: DatasetSpec):
    key = json.dumps(dataclasses.asdict(spec), sort_keys=True)
    if key not in _DATASETS:
        if spec.synthetic is not None:
            ds, predefined = make_synthetic_dataset(**spec.synthetic), None
        else:
            manifest = Manifest.from_dict(spec.manifest)
            ds, predefined = load_manifest(manifest), read_split_column(manifest)
        _DATASETS[key] = (ds, predefined)
    return _DATASETS[key]


def load_pfn(path: Optional[str]) -> PFNWeights:
    if path not in _PFN:
        if path is None:
            from .pfn.build import load_default

            _PFN[path] = load_default()
        else:
            _PFN[path] = load_weights(path, expected=PFNConfig())
    return _PFN[path]


def _image_fingerprint(ds: MultimodalDataset) -> str:
    parts = []
    for s in ds.samples:
        if s.image.loaded is not None:
            parts.append(cache_key(s.image.loaded))
        else:
            p = Path(s.image.path)
            parts.append(f"{p}:{p.stat().st_mtime_ns}")
    return cache_key(ds.name, tuple(parts))


def _apply_masks(parts: List[MultimodalDataset], spec: RunSpec, cfg: ExperimentConfig
                 ) -> List[MultimodalDataset]:
    if spec.ratio == 0:
        return parts
    out = []
    for i, part in enumerate(parts):
        if cfg.mask.scope == "train-only" and i > 0:
            out.append(part)
            continue
        # disjoint seeds per split
        seed = int(np.random.SeedSequence([spec.seed, int(spec.ratio * 1e6), i]).generate_state(1)[0])
        if cfg.mask.mechanism == "mnar":
            cols = cfg.mask.columns or [0]
            for c in cols:
                part = mask_mnar(part, c, spec.ratio, seed + c)
            out.append(part)
        else:
            cols = tuple(cfg.mask.columns) if cfg.mask.columns else None
            out.append(mask_tabular(part, MaskSpec(spec.ratio, cfg.mask.scope, seed, cols)))
    return out


@dataclass
class PreparedRun:
    model: TIMEModel
    train: ModelInputs
    val: ModelInputs
    test: ModelInputs
    context: Optional[ContextSet]
    cache_keys: Dict[str, str]


def prepare_run(cfg: ExperimentConfig, spec: RunSpec, cache: Optional[EmbeddingCache] = None
                ) -> PreparedRun:
    cache = cache if cache is not None else EmbeddingCache()
    ds, predefined = load_dataset(cfg.datasets[spec.dataset])
    split_seed = cfg.split_seed if cfg.split_seed is not None else spec.seed
    split = split_dataset(ds, split_seed, predefined, stratify=cfg.stratify)
    parts = [ds.subset(split.train), ds.subset(split.val), ds.subset(split.test)]
    parts = _apply_masks(parts, spec, cfg)
    if spec.policy == "median-impute":
        imputer = fit_imputer(parts[0])
        parts = [apply_imputer(imputer, p) for p in parts]
    normalizer = Normalizer.fit(parts[0])
    rows = [normalizer.transform_arrays(p.values, p.missing) for p in parts]
    ys = [torch.as_tensor(p.targets, dtype=torch.long if ds.task == CLASSIFICATION else torch.float32)
          for p in parts]

    tabular, uses_images, fusion = _parse_model(spec.model)
    pfn = load_pfn(cfg.pfn_weights) if tabular == "pfn" else None
    torch.manual_seed(spec.seed)
    image_encoder = None
    if uses_images:
        image_encoder = ImageEncoder(cfg.image_encoder, cfg.image_dim, spec.mode, cfg.image_weights)
    mlp = None
    if tabular == "mlp":
        mlp = MLPTabularEncoder(ds.d, normalizer.cardinalities())
    n_out = ds.n_classes if ds.task == CLASSIFICATION else 1
    model = TIMEModel(ds.task, n_out, tabular, image_encoder, fusion or "cat", cfg.k, mlp, pfn,
                      normalizer, cfg.strict_probe)

    keys: Dict[str, str] = {}
    tabs: List[Optional[torch.Tensor]] = [None, None, None]
    context = None
    if tabular == "pfn":
        context = ContextSet(rows[0], parts[0].missing, parts[0].targets, ds.task, ds.n_classes)
        base = (pfn.parameter_hash(), context.fingerprint(), spec.policy, cfg.n_folds)
        keys["train"] = cache_key("pfn-oof", *base)
        embs = [cache.get_or_compute(keys["train"],
                                     lambda: pfn_embed_context(pfn, context, cfg.n_folds, seed=0))]
        for name, r, p in (("val", rows[1], parts[1]), ("test", rows[2], parts[2])):
            keys[name] = cache_key("pfn", *base, r, p.missing)
            embs.append(cache.get_or_compute(keys[name], lambda r=r, p=p: pfn_embed(pfn, context, r, p.missing)))
        tabs = [torch.from_numpy(np.asarray(e, dtype=np.float32)) for e in embs]
    elif tabular == "mlp":
        tabs = [torch.from_numpy(r.astype(np.float32)) for r in rows]

    imgs: List[Optional[torch.Tensor]] = [None, None, None]
    raw_images: List[Optional[list]] = [None, None, None]
    if image_encoder is not None:
        if spec.mode == "frozen":
            keys["image"] = cache_key("img", tensor_fingerprint(image_encoder), _image_fingerprint(ds))
            all_emb = cache.get_or_compute(keys["image"], lambda: image_embed(image_encoder, ds.images(), ds.ids))
            imgs = [torch.from_numpy(all_emb[list(idx)]) for idx in (split.train, split.val, split.test)]
        else:
            raw_images = [p.images() for p in parts]
    inputs = [ModelInputs(ys[i], tabs[i], imgs[i], raw_images[i],
                          image_encoder.image_size if image_encoder is not None else 256)
              for i in range(3)]
    return PreparedRun(model, *inputs, context=context, cache_keys=keys)


def tensor_fingerprint(module: torch.nn.Module) -> str:
    from .model import tensor_hash

    return tensor_hash(module.state_dict().items())


def run_name(cfg: ExperimentConfig, spec: RunSpec) -> str:
    label = cfg.datasets[spec.dataset].label
    return f"{label}_{spec.model}_{spec.mode}_{spec.policy}_r{spec.ratio:g}_s{spec.seed}"


def checkpoint_config(cfg: ExperimentConfig, spec: RunSpec) -> Dict:
    """The config a checkpoint is bound to: experiment config plus the run's grid point."""
    d = cfg.to_dict()
    d.pop("output_dir", None)
    return dict(d, run=dataclasses.asdict(spec), image_preprocessing=preprocessing_info())


def run_single(cfg: ExperimentConfig, spec: RunSpec, cache: Optional[EmbeddingCache] = None,
               out_dir: Optional[Path] = None) -> Dict:
    """Split, mask/impute, embed, train and score one configuration on test."""
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    prep = prepare_run(cfg, spec, cache)
    tcfg = dataclasses.replace(cfg.train, seed=spec.seed)
    record = train_model(prep.model, prep.train, prep.val, tcfg)
    record.test_metric = score(prep.model, prep.test)
    ds_label = cfg.datasets[spec.dataset].label
    if out_dir is not None:
        rel = Path("checkpoints") / run_name(cfg, spec)
        ckpt = save_checkpoint(prep.model, Path(out_dir) / rel, checkpoint_config(cfg, spec),
                               spec.seed, record.best_epoch, record.best_val)
        record.checkpoint = str(rel)
        (ckpt / "run_record.json").write_text(record.to_json())
    return {
        "config_hash": cfg.hash(), "dataset": ds_label, "model": spec.model, "mode": spec.mode,
        "policy": spec.policy, "ratio": spec.ratio, "seed": spec.seed, "metric": record.metric,
        "value": record.test_metric, "best_epoch": record.best_epoch,
        "train_loss": record.train_loss, "runtime": time.perf_counter() - t0,
        "checkpoint": record.checkpoint, "error": None,
    }


def _run_safe(cfg: ExperimentConfig, spec: RunSpec, out_dir: Optional[Path]) -> Dict:
    try:
        return run_single(cfg, spec, _worker_cache(), out_dir)
    except Exception as exc:  # recorded; the grid cell is left absent
        logger.error("run %s failed: %s", spec, exc)
        return {"config_hash": cfg.hash(), "dataset": cfg.datasets[spec.dataset].label,
                "model": spec.model, "mode": spec.mode, "policy": spec.policy, "ratio": spec.ratio,
                "seed": spec.seed, "metric": None, "value": None, "runtime": None,
                "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}


_CACHE: Optional[EmbeddingCache] = None


def _worker_cache() -> EmbeddingCache:
    global _CACHE
    if _CACHE is None:
        _CACHE = EmbeddingCache()
    return _CACHE


@dataclass
class ProtocolResult:
    records: List[Dict]
    cells: List[ResultCell]

    @property
    def failures(self) -> List[Dict]:
        return [r for r in self.records if r["error"]]


def collect_cells(records: Sequence[Dict]) -> List[ResultCell]:
    groups: Dict[Tuple, ResultCell] = {}
    for r in records:
        if r["error"]:
            continue
        key = (r["model"], r["dataset"], r["mode"], r["policy"], r["ratio"])
        if key not in groups:
            groups[key] = ResultCell(r["model"], r["dataset"], r["mode"], r["policy"], r["ratio"],
                                     r["metric"])
        groups[key].scores.append(r["value"])
    return list(groups.values())


def run_protocol(cfg: ExperimentConfig, out_dir=None, jobs: int = 1,
                 results_name: str = "results.jsonl") -> ProtocolResult:
    """Run every (dataset, model, mode, policy, ratio, seed) combination.

    Per-run records are appended to ``out_dir/results_name`` as they finish.
    Wall-clock runtimes go to a sibling ``timings.jsonl`` so the results file
    itself is byte-identical across deterministic reruns.
    """
    runs = expand_runs(cfg)
    logger.info("image preprocessing: %s", preprocessing_info())
    out = Path(out_dir) if out_dir is not None else None
    results_file = timings_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        results_file = out / results_name
        timings_file = out / (Path(results_name).stem + ".timings.jsonl")
        results_file.write_text("")
        timings_file.write_text("")
    records: List[Dict] = []

    def emit(rec: Dict):
        records.append(rec)
        if results_file is None:
            return
        slim = {k: v for k, v in rec.items() if k not in ("train_loss", "traceback", "runtime")}
        with open(results_file, "a") as f:
            f.write(json.dumps(slim, sort_keys=True) + "\n")
        timing = {k: rec[k] for k in ("config_hash", "dataset", "model", "mode", "policy", "ratio",
                                      "seed", "runtime")}
        with open(timings_file, "a") as f:
            f.write(json.dumps(timing, sort_keys=True) + "\n")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_run_safe, [cfg] * len(runs), runs, [out] * len(runs)):
                emit(rec)
    else:
        for spec in runs:
            emit(_run_safe(cfg, spec, out))
    return ProtocolResult(records, collect_cells(records))
