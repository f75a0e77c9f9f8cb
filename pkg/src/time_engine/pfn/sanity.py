"""Held-out Gaussian-blob tasks and a logistic-regression oracle for the encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .core import ContextSet, PFNWeights, pfn_predict


@dataclass
class BlobTask:
    x_ctx: np.ndarray
    y_ctx: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray


def make_blob_task(seed: int, d: int = 4, n_context: int = 200, n_query: int = 200,
                   separation: float = 4.0) -> BlobTask:
    """Two unit-covariance Gaussians whose means are ``separation`` apart."""
    rng = np.random.default_rng([7919, seed])
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    offset = rng.normal(0.0, 2.0, d)
    scale = rng.uniform(0.5, 3.0, d)

    def draw(n):
        y = rng.permutation(np.arange(n) % 2)
        x = rng.standard_normal((n, d)) + np.outer(2 * y - 1, u) * separation / 2
        return (x * scale + offset).astype(np.float32), y

    x_c, y_c = draw(n_context)
    x_q, y_q = draw(n_query)
    return BlobTask(x_c, y_c, x_q, y_q)


@dataclass
class BlobReport:
    accuracy: List[float]
    oracle_accuracy: List[float]
    agreement: List[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def mean_agreement(self) -> float:
        return float(np.mean(self.agreement))


def evaluate_blobs(w: PFNWeights, n_tasks: int = 20, n_context: int = 200, d: int = 4,
                   first_seed: int = 10_000) -> BlobReport:
    from sklearn.linear_model import LogisticRegression

    acc, oracle_acc, agree = [], [], []
    for s in range(first_seed, first_seed + n_tasks):
        t = make_blob_task(s, d=d, n_context=n_context)
        ctx = ContextSet(t.x_ctx, np.zeros_like(t.x_ctx, dtype=bool), t.y_ctx, n_classes=2)
        pred = pfn_predict(w, ctx, t.x_query).argmax(1)
        oracle = LogisticRegression().fit(t.x_ctx, t.y_ctx).predict(t.x_query)
        acc.append(float(np.mean(pred == t.y_query)))
        oracle_acc.append(float(np.mean(oracle == t.y_query)))
        agree.append(float(np.mean(pred == oracle)))
    return BlobReport(acc, oracle_acc, agree)
