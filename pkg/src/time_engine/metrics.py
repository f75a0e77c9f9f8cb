from __future__ import annotations

import numpy as np


def _check(preds, targets):
    preds, targets = np.asarray(preds), np.asarray(targets)
    if len(preds) != len(targets):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(targets)} targets")
    if len(preds) == 0:
        raise ValueError("no predictions to score")
    return preds, targets


def accuracy(preds, targets) -> float:
    """Fraction of rows whose argmax matches the target; ties go to the lowest class."""
    preds, targets = _check(preds, targets)
    return float(np.mean(np.argmax(preds, axis=1) == targets))


def mse(preds, targets) -> float:
    preds, targets = _check(preds, targets)
    return float(np.mean((preds.astype(np.float64) - targets) ** 2))
