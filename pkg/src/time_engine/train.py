"""Optimization loop: AdamW, step-decay schedule, early stopping, checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import CLASSIFICATION
from .encoders import preprocess_images
from .metrics import accuracy, mse
from .model import TIMEModel, trainable_parameters

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.01
    decay: float = 0.9
    decay_every: int = 20
    batch_size: int = 64
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.patience < 1:
            raise ValueError("decay_every and patience must be >= 1")


def lr_at_epoch(cfg: TrainConfig, e: int) -> float:
    if not 0 <= e < cfg.epochs:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.decay ** (e // cfg.decay_every)


class EarlyStopper:
    """Tracks the best validation metric; epochs are numbered from 1."""

    def __init__(self, patience: int, higher_is_better: bool = True):
        self.patience = patience
        self.higher_is_better = higher_is_better
        self.best_metric: Optional[float] = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record ``metric`` for ``epoch``; True when it is a new best."""
        better = (self.best_metric is None
                  or (metric > self.best_metric if self.higher_is_better else metric < self.best_metric))
        if better:
            self.best_metric, self.best_epoch, self.bad_epochs = metric, epoch, 0
        else:
            self.bad_epochs += 1
        return better

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class ModelInputs:
    """Per-split tensors fed to the model.

    ``tab`` holds in-context embeddings (pfn branch) or normalized cells
    (mlp branch). The image side is either cached embeddings (frozen
    backbone) or raw arrays that are preprocessed batch by batch.
    """

    y: torch.Tensor
    tab: Optional[torch.Tensor] = None
    img: Optional[torch.Tensor] = None
    images: Optional[Sequence[np.ndarray]] = None
    image_size: int = 256

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, idx: np.ndarray):
        tab = self.tab[idx] if self.tab is not None else None
        if self.img is not None:
            return tab, self.img[idx], True
        if self.images is not None:
            return tab, preprocess_images([self.images[i] for i in idx], self.image_size), False
        return tab, None, True


@dataclass
class RunRecord:
    train_loss: List[float] = field(default_factory=list)
    val_metric: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    initial_train_loss: float = float("nan")
    best_epoch: int = 0
    best_val: float = float("nan")
    stopped_epoch: int = 0
    wall_time: float = 0.0
    metric: str = "accuracy"
    config: Dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    test_metric: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _loss(model: TIMEModel, out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if model.task == CLASSIFICATION:
        return F.cross_entropy(out, y)
    return F.mse_loss(out, y)


@torch.no_grad()
def predict_inputs(model: TIMEModel, inputs: ModelInputs, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    try:
        for s in range(0, len(inputs), batch_size):
            tab, img, is_emb = inputs.batch(np.arange(s, min(s + batch_size, len(inputs))))
            outs.append(model.predict(tab, img, is_emb))
    finally:
        model.train(was_training)
    return torch.cat(outs).numpy()


def score(model: TIMEModel, inputs: ModelInputs) -> float:
    preds = predict_inputs(model, inputs)
    y = inputs.y.numpy()
    return accuracy(preds, y) if model.task == CLASSIFICATION else mse(preds, y)


@torch.no_grad()
def mean_loss(model: TIMEModel, inputs: ModelInputs, batch_size: int = 256) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        for s in range(0, len(inputs), batch_size):
            idx = np.arange(s, min(s + batch_size, len(inputs)))
            tab, img, is_emb = inputs.batch(idx)
            total += float(_loss(model, model(tab, img, is_emb), inputs.y[idx])) * len(idx)
    finally:
        model.train(was_training)
    return total / len(inputs)


def train_model(model: TIMEModel, train: ModelInputs, val: ModelInputs, cfg: TrainConfig,
                evaluate: Optional[Callable[[TIMEModel, ModelInputs], float]] = None) -> RunRecord:
    """Optimize the trainable set only, keep the best-validation parameters.

    ``evaluate`` overrides the validation metric (accuracy or MSE by default).
    """
    evaluate = evaluate or score
    higher = model.task == CLASSIFICATION
    record = RunRecord(metric="accuracy" if higher else "mse", config=asdict(cfg))
    named = trainable_parameters(model)
    keep = {n for n, _ in named}
    for n, p in model.named_parameters():
        p.requires_grad_(n in keep)
    params = [p for _, p in named]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience, higher_is_better=higher)
    best_state = copy.deepcopy(model.state_dict())
    record.initial_train_loss = mean_loss(model, train)
    t0 = time.perf_counter()

    for e in range(cfg.epochs):
        lr = lr_at_epoch(cfg, e)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = np.random.default_rng([cfg.seed, e]).permutation(len(train))
        total = 0.0
        for step, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            tab, img, is_emb = train.batch(idx)
            loss = _loss(model, model(tab, img, is_emb), train.y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {e + 1}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        record.train_loss.append(total / len(order))
        record.lr.append(lr)
        metric = float(evaluate(model, val))
        record.val_metric.append(metric)
        if stopper.update(e + 1, metric):
            best_state = copy.deepcopy(model.state_dict())
        logger.debug("epoch %d loss %.4f val %.4f", e + 1, record.train_loss[-1], metric)
        if stopper.should_stop:
            break

    model.load_state_dict(best_state)
    record.best_epoch = stopper.best_epoch
    record.best_val = float(stopper.best_metric)
    record.stopped_epoch = len(record.train_loss)
    record.wall_time = time.perf_counter() - t0
    return record


# ---------------------------------------------------------------------------
# checkpoint directory: config.json, params.pt, trainable.json, meta.json

def config_hash(config: Dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(model: TIMEModel, out_dir, config: Dict, seed: int, epoch: int,
                    val_metric: float) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(config)
    (out / "config.json").write_text(json.dumps({"config": config, "config_hash": h},
                                                indent=2, sort_keys=True, default=str))
    torch.save(model.state_dict(), out / "params.pt")
    (out / "trainable.json").write_text(json.dumps([n for n, _ in trainable_parameters(model)], indent=2))
    (out / "meta.json").write_text(json.dumps({"seed": seed, "epoch": epoch, "val_metric": val_metric,
                                               "config_hash": h}, indent=2))
    return out


def load_checkpoint(model: TIMEModel, ckpt_dir, config: Dict) -> Dict:
    """Load parameters into ``model`` after checking the config hash."""
    ckpt = Path(ckpt_dir)
    stored = json.loads((ckpt / "config.json").read_text())
    if stored["config_hash"] != config_hash(config):
        raise ValueError(f"checkpoint {ckpt} was written for a different config")
    model.load_state_dict(torch.load(ckpt / "params.pt", map_location="cpu", weights_only=True))
    return json.loads((ckpt / "meta.json").read_text())
