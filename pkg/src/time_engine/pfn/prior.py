"""Synthetic task prior for the desk-scale in-context encoder.

Tasks are drawn from random small neural networks with random activations
over Gaussian/uniform (optionally correlated) inputs. Classification labels
come from quantile-bucketing the network output, regression targets are the
standardized output. Missingness is injected at a sampled rate: MCAR by
default, optionally self-masking (a cell's chance of being missing grows or
shrinks with its own value) for a fraction ``mnar_prob`` of tasks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

# v2 size bounds; a PriorConfig must stay inside them.
MAX_ROWS = 10_000
MAX_FEATURES = 500
MAX_CLASSES = 10

_ACTIVATIONS = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "sin": np.sin,
    "abs": np.abs,
    "square": lambda x: np.clip(x, -3, 3) ** 2,
}


@dataclass(frozen=True)
class PriorConfig:
    rows: Tuple[int, int] = (50, 512)
    features: Tuple[int, int] = (3, 20)
    classes: Tuple[int, int] = (2, 10)
    depth: Tuple[int, int] = (0, 2)  # hidden layers of the generating network
    width: Tuple[int, int] = (8, 64)
    missing_rate: Tuple[float, float] = (0.0, 0.4)
    missing_prob: float = 0.5  # fraction of tasks that receive any missingness
    mnar_prob: float = 0.0  # of those, fraction with value-dependent missingness
    noise: Tuple[float, float] = (0.0, 0.3)
    query_fraction: Tuple[float, float] = (0.2, 0.5)
    regression_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi) in (("rows", self.rows), ("features", self.features),
                               ("classes", self.classes), ("depth", self.depth),
                               ("width", self.width)):
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.rows[0] < 4 or self.rows[1] > MAX_ROWS:
            raise ValueError(f"rows must lie in [4, {MAX_ROWS}]")
        if self.features[0] < 1 or self.features[1] > MAX_FEATURES:
            raise ValueError(f"features must lie in [1, {MAX_FEATURES}]")
        if self.classes[0] < 2 or self.classes[1] > MAX_CLASSES:
            raise ValueError(f"classes must lie in [2, {MAX_CLASSES}]")
        if not 0.0 <= self.missing_rate[0] <= self.missing_rate[1] < 1.0:
            raise ValueError("missing_rate must satisfy 0 <= lo <= hi < 1")
        if not (0.0 <= self.missing_prob <= 1.0 and 0.0 <= self.mnar_prob <= 1.0):
            raise ValueError("missing_prob and mnar_prob must lie in [0, 1]")
        if not 0.0 <= self.regression_fraction <= 1.0:
            raise ValueError("regression_fraction must lie in [0, 1]")


@dataclass
class SyntheticTask:
    values: np.ndarray  # (N, d) float32, NaN under the mask
    missing: np.ndarray  # (N, d) bool
    labels: np.ndarray  # (N,) int64 for classification, float32 for regression
    kind: str
    n_classes: int  # 0 for regression
    context_idx: np.ndarray = field(repr=False)
    query_idx: np.ndarray = field(repr=False)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


def _sample_inputs(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = np.empty((n, d))
    for j in range(d):
        if rng.random() < 0.5:
            x[:, j] = rng.standard_normal(n)
        else:
            x[:, j] = rng.uniform(-1.7, 1.7, n)
    if rng.random() < 0.5:
        mix = np.eye(d) + 0.5 * rng.standard_normal((d, d)) / np.sqrt(d)
        x = x @ mix
    return x


def _random_function(rng: np.random.Generator, cfg: PriorConfig, x: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    relevant = rng.random(d) < rng.uniform(0.3, 1.0)
    if not relevant.any():
        relevant[rng.integers(d)] = True
    h = x[:, relevant]
    depth = int(rng.integers(cfg.depth[0], cfg.depth[1] + 1))
    names = list(_ACTIVATIONS)
    for _ in range(depth):
        width = int(rng.integers(cfg.width[0], cfg.width[1] + 1))
        w = rng.standard_normal((h.shape[1], width)) / np.sqrt(h.shape[1])
        b = 0.5 * rng.standard_normal(width)
        act = _ACTIVATIONS[names[rng.integers(len(names))]]
        h = act(h @ w + b)
    w = rng.standard_normal(h.shape[1]) / np.sqrt(h.shape[1])
    f = h @ w
    scale = f.std()
    f = f / scale if scale > 1e-8 else f
    return f + rng.uniform(*cfg.noise) * rng.standard_normal(len(f))


def _bucket(rng: np.random.Generator, f: np.ndarray, c: int) -> np.ndarray:
    # class proportions from a Dirichlet, floored so no class is vanishingly rare
    props = rng.dirichlet(np.full(c, 2.0))
    props = 0.5 * props + 0.5 / c
    cuts = np.quantile(f, np.cumsum(props)[:-1])
    labels = np.searchsorted(cuts, f, side="right")
    return rng.permutation(c)[labels]


def _split_context(rng: np.random.Generator, cfg: PriorConfig, labels: np.ndarray,
                   n_classes: int, n_query: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    n = len(labels)
    if n_query is None:
        n_query = int(round(rng.uniform(*cfg.query_fraction) * n))
    n_query = min(max(n_query, 1), n - max(n_classes, 1))
    order = rng.permutation(n)
    context, query = order[n_query:], order[:n_query]
    if n_classes:
        # every class must appear in the context portion
        for c in range(n_classes):
            if not np.any(labels[context] == c):
                donors = np.flatnonzero(labels[query] == c)
                if len(donors) == 0:
                    continue
                k = donors[0]
                takers = [i for i, v in enumerate(context)
                          if np.sum(labels[context] == labels[v]) > 1]
                swap = takers[0]
                context[swap], query[k] = query[k], context[swap]
    return np.sort(context), np.sort(query)


def sample_task(rng: np.random.Generator, cfg: PriorConfig, n: int, d: int,
                n_classes: int, kind: str = "classification",
                missing_rate: Optional[float] = None,
                n_query: Optional[int] = None) -> SyntheticTask:
    """Draw one task with fixed dimensions from ``rng``."""
    x = _sample_inputs(rng, n, d)
    f = _random_function(rng, cfg, x)
    if kind == "classification":
        labels = _bucket(rng, f, n_classes)
        # quantile cuts can collapse on heavily tied outputs
        present = np.unique(labels)
        if len(present) < n_classes:
            labels = np.argsort(np.argsort(f + 1e-6 * rng.standard_normal(n))) * n_classes // n
            labels = rng.permutation(n_classes)[labels]
        labels = labels.astype(np.int64)
    else:
        labels = ((f - f.mean()) / (f.std() + 1e-8)).astype(np.float32)
        n_classes = 0

    if missing_rate is None:
        missing_rate = rng.uniform(*cfg.missing_rate) if rng.random() < cfg.missing_prob else 0.0
    if missing_rate > 0 and rng.random() < cfg.mnar_prob:
        z = (x - x.mean(0)) / (x.std(0) + 1e-8)
        slope = rng.uniform(1.0, 4.0, d) * rng.choice([-1.0, 1.0], d)
        p = np.clip(2 * missing_rate / (1 + np.exp(-slope * z)), 0.0, 0.95)
        missing = rng.random((n, d)) < p
    else:
        missing = rng.random((n, d)) < missing_rate
    values = x.astype(np.float32)
    values[missing] = np.nan
    context, query = _split_context(rng, cfg, labels if n_classes else np.zeros(n), n_classes, n_query)
    return SyntheticTask(values, missing, labels, kind, n_classes, context, query)


def generate_synthetic_task(cfg: PriorConfig, seed: int) -> SyntheticTask:
    """Deterministic in ``(cfg, seed)``."""
    rng = np.random.default_rng([cfg.seed, seed])
    n = int(rng.integers(cfg.rows[0], cfg.rows[1] + 1))
    d = int(rng.integers(cfg.features[0], cfg.features[1] + 1))
    kind = "regression" if rng.random() < cfg.regression_fraction else "classification"
    c = int(rng.integers(cfg.classes[0], cfg.classes[1] + 1))
    return sample_task(rng, cfg, n, d, c, kind)
