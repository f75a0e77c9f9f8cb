"""Inference, training and checkpoint IO for the desk-scale in-context encoder."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .network import EMBED_DIM, InContextTransformer, PFNConfig
from .prior import MAX_CLASSES, MAX_ROWS, PriorConfig, sample_task

logger = logging.getLogger(__name__)

MAGIC = b"TIMEPFN\x00"
FORMAT_VERSION = 1


class PFNDivergenceError(RuntimeError):
    pass


class ArchMismatchError(ValueError):
    pass


@dataclass
class PFNWeights:
    """A frozen in-context encoder: network, its config and provenance metadata."""

    config: PFNConfig
    network: InContextTransformer
    version: str = "desk-1"
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.network.eval()
        for p in self.network.parameters():
            p.requires_grad_(False)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.network.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class ContextSet:
    """Training split used to condition every prediction and embedding."""

    values: np.ndarray  # (n, d)
    missing: np.ndarray  # (n, d) bool
    labels: np.ndarray
    kind: str = "classification"
    n_classes: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.shape != self.missing.shape or self.values.ndim != 2:
            raise ValueError("values and missing must be matching (n, d) arrays")
        if len(self.labels) != len(self.values):
            raise ValueError("one label per context row is required")
        if self.kind == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if not self.n_classes:
                self.n_classes = int(self.labels.max()) + 1
            if self.n_classes > MAX_CLASSES:
                raise ValueError(f"{self.n_classes} classes exceed the supported {MAX_CLASSES}")
        elif self.kind == "regression":
            self.labels = np.asarray(self.labels, dtype=np.float32)
            self.n_classes = 0
        else:
            raise ValueError(f"unknown task kind {self.kind!r}")

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.values)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        for a in (np.where(self.missing, 0.0, self.values).astype(np.float32), self.missing, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def standardize(values: np.ndarray, missing: np.ndarray, ref_values: np.ndarray,
                ref_missing: np.ndarray) -> np.ndarray:
    """Z-score ``values`` with per-feature statistics of the observed reference cells."""
    observed = ~ref_missing
    ref = np.where(observed, ref_values, 0.0).astype(np.float64)
    count = np.maximum(observed.sum(0), 1)
    mean = ref.sum(0) / count
    var = (np.where(observed, ref - mean, 0.0) ** 2).sum(0) / count
    std = np.sqrt(var)
    std[std < 1e-8] = 1.0
    out = (np.where(missing, 0.0, values) - mean) / std
    return np.where(missing, 0.0, out).astype(np.float32)


def _subsample_context(ctx: ContextSet, limit: int) -> ContextSet:
    if len(ctx) <= limit:
        return ctx
    warnings.warn(f"context of {len(ctx)} rows exceeds {limit}; using a stratified subsample")
    rng = np.random.default_rng(0)
    if ctx.kind == "classification":
        keep = []
        for c in range(ctx.n_classes):
            idx = np.flatnonzero(ctx.labels == c)
            take = int(round(limit * len(idx) / len(ctx)))
            keep.append(rng.choice(idx, size=min(max(take, 1), len(idx)), replace=False))
        keep = np.sort(np.concatenate(keep))[:limit]
    else:
        keep = np.sort(rng.choice(len(ctx), size=limit, replace=False))
    return ContextSet(ctx.values[keep], ctx.missing[keep], ctx.labels[keep], ctx.kind, ctx.n_classes)


def _feature_chunks(d: int, d_max: int) -> List[np.ndarray]:
    return [np.arange(s, min(s + d_max, d)) for s in range(0, d, d_max)]


def _check_queries(ctx: ContextSet, values, missing) -> Tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float32)
    if missing is None:
        missing = np.isnan(values)
    missing = np.asarray(missing, dtype=bool)
    if values.ndim != 2 or values.shape != missing.shape:
        raise ValueError("query values and missing must be matching (n, d) arrays")
    if values.shape[1] != ctx.n_features:
        raise ValueError(f"queries have {values.shape[1]} features, context has {ctx.n_features}")
    return values, missing


@torch.no_grad()
def _hidden(w: PFNWeights, ctx: ContextSet, values: np.ndarray, missing: np.ndarray,
            query_chunk: int = 1024) -> List[torch.Tensor]:
    """Query hidden states, one tensor per feature chunk."""
    ctx = _subsample_context(ctx, MAX_ROWS)
    net = w.network
    if ctx.kind == "classification" and ctx.n_classes > w.config.c_max:
        raise ValueError(f"{ctx.n_classes} classes exceed the encoder maximum {w.config.c_max}")
    if ctx.kind == "regression":
        mu, sd = float(ctx.labels.mean()), float(ctx.labels.std()) or 1.0
        y = torch.from_numpy((ctx.labels - mu) / sd)
    else:
        y = torch.from_numpy(ctx.labels)
    chunks = _feature_chunks(ctx.n_features, w.config.d_max)
    if len(chunks) > 1:
        warnings.warn(f"{ctx.n_features} features exceed {w.config.d_max}; averaging over "
                      f"{len(chunks)} feature groups")
    out = []
    for cols in chunks:
        xc = standardize(ctx.values[:, cols], ctx.missing[:, cols], ctx.values[:, cols], ctx.missing[:, cols])
        xq = standardize(values[:, cols], missing[:, cols], ctx.values[:, cols], ctx.missing[:, cols])
        h = net(torch.from_numpy(xc)[None], torch.from_numpy(ctx.missing[:, cols])[None], y[None],
                torch.from_numpy(xq)[None], torch.from_numpy(missing[:, cols])[None],
                kind=ctx.kind, query_chunk=query_chunk)
        out.append(h[0])
    return out


def pfn_embed(w: PFNWeights, ctx: ContextSet, values, missing=None) -> np.ndarray:
    """Final query-token hidden state for each row, shape (n, 192)."""
    values, missing = _check_queries(ctx, values, missing)
    hs = _hidden(w, ctx, values, missing)
    return torch.stack(hs).mean(0).numpy()


def pfn_predict(w: PFNWeights, ctx: ContextSet, values, missing=None) -> np.ndarray:
    """Posterior predictive: (n, C) class probabilities, or (n,) means for regression."""
    values, missing = _check_queries(ctx, values, missing)
    hs = _hidden(w, ctx, values, missing)
    net = w.network
    with torch.no_grad():
        if ctx.kind == "classification":
            probs = torch.stack([torch.softmax(net.class_logits(h, ctx.n_classes).double(), -1) for h in hs])
            return probs.mean(0).numpy()
        mu, sd = float(ctx.labels.mean()), float(ctx.labels.std()) or 1.0
        means = torch.stack([net.regression_mean(h).double() for h in hs]).mean(0)
        return (means * sd + mu).numpy()


def pfn_embed_context(w: PFNWeights, ctx: ContextSet, n_folds: int = 5, seed: int = 0) -> np.ndarray:
    """Out-of-fold embeddings for the context rows themselves.

    A context row embedded against a context that contains its own label
    leaks that label into the embedding; each fold is embedded against the
    remaining folds instead.
    """
    n = len(ctx)
    n_folds = max(2, min(n_folds, n))
    rng = np.random.default_rng(seed)
    if ctx.kind == "classification":
        fold = np.empty(n, dtype=np.int64)
        for c in range(ctx.n_classes):
            idx = rng.permutation(np.flatnonzero(ctx.labels == c))
            fold[idx] = (np.arange(len(idx)) + c) % n_folds
    else:
        fold = rng.permutation(np.arange(n) % n_folds)
    out = np.zeros((n, EMBED_DIM), dtype=np.float32)
    for k in range(n_folds):
        q = fold == k
        if not q.any():
            continue
        rest = ~q
        sub = ContextSet(ctx.values[rest], ctx.missing[rest], ctx.labels[rest], ctx.kind, ctx.n_classes)
        out[q] = pfn_embed(w, sub, ctx.values[q], ctx.missing[q])
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class PFNTrainResult:
    weights: PFNWeights
    loss_history: List[float]
    seconds: float


def _batch(rng: np.random.Generator, prior: PriorConfig, arch: PFNConfig, batch_size: int):
    n = int(rng.integers(prior.rows[0], prior.rows[1] + 1))
    d = int(rng.integers(prior.features[0], min(prior.features[1], arch.d_max) + 1))
    kind = "regression" if rng.random() < prior.regression_fraction else "classification"
    c = int(rng.integers(prior.classes[0], min(prior.classes[1], arch.c_max) + 1))
    c = min(c, n // 4) if kind == "classification" else 0
    c = max(c, 2) if kind == "classification" else 0
    n_query = max(1, int(round(rng.uniform(*prior.query_fraction) * n)))
    xs_c, ms_c, ys_c, xs_q, ms_q, ys_q = [], [], [], [], [], []
    for _ in range(batch_size):
        t = sample_task(rng, prior, n, d, c, kind, n_query=n_query)
        ci, qi = t.context_idx, t.query_idx
        xs_c.append(standardize(t.values[ci], t.missing[ci], t.values[ci], t.missing[ci]))
        xs_q.append(standardize(t.values[qi], t.missing[qi], t.values[ci], t.missing[ci]))
        ms_c.append(t.missing[ci])
        ms_q.append(t.missing[qi])
        ys_c.append(t.labels[ci])
        ys_q.append(t.labels[qi])
    st = lambda a: torch.from_numpy(np.stack(a))
    return kind, c, st(xs_c), st(ms_c), st(ys_c), st(xs_q), st(ms_q), st(ys_q)


def train_pfn(prior: PriorConfig, arch: PFNConfig, steps: int, seed: int = 0,
              batch_size: int = 8, lr: float = 1e-3, warmup: int = 100,
              log_every: int = 0) -> PFNTrainResult:
    """Fit the in-context encoder on freshly sampled prior tasks.

    Deterministic for a fixed seed when torch runs single-threaded.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    torch.manual_seed(seed)
    net = InContextTransformer(arch)
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * s / steps)))
    history: List[float] = []
    t0 = time.perf_counter()
    for step in range(steps):
        rng = np.random.default_rng([prior.seed, seed, step])
        kind, c, xc, mc, yc, xq, mq, yq = _batch(rng, prior, arch, batch_size)
        h = net(xc, mc, yc, xq, mq, kind=kind)
        if kind == "classification":
            loss = F.cross_entropy(net.class_logits(h, c).reshape(-1, c), yq.reshape(-1))
        else:
            loss = F.mse_loss(net.regression_mean(h), yq)
        if not torch.isfinite(loss):
            raise PFNDivergenceError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sched.step()
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.4f", step + 1, float(np.mean(history[-log_every:])))
    seconds = time.perf_counter() - t0
    meta = {"steps": steps, "seed": seed, "batch_size": batch_size, "train_seconds": seconds,
            "prior": asdict(prior)}
    return PFNTrainResult(PFNWeights(arch, net, meta=meta), history, seconds)


# ---------------------------------------------------------------------------
# checkpoint: MAGIC | u32 version | 64-byte arch hash | u32 meta length | meta json | torch state

def save_weights(w: PFNWeights, path) -> None:
    meta = json.dumps({"config": asdict(w.config), "version": w.version, "meta": w.meta},
                      sort_keys=True).encode()
    buf = io.BytesIO()
    torch.save(w.network.state_dict(), buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(w.config.arch_hash().encode())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(buf.getvalue())
    tmp.replace(path)


def load_weights(path, expected: Optional[PFNConfig] = None) -> PFNWeights:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not an encoder checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch_hash = f.read(64).decode("ascii", errors="replace")
        (n,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(n))
        state = torch.load(io.BytesIO(f.read()), map_location="cpu", weights_only=True)
    cfg = PFNConfig(**meta["config"])
    if cfg.arch_hash() != arch_hash:
        raise ArchMismatchError("checkpoint header does not match its stored architecture")
    if expected is not None and expected.arch_hash() != arch_hash:
        raise ArchMismatchError(f"checkpoint architecture {arch_hash[:12]} does not match "
                                f"the requested {expected.arch_hash()[:12]}")
    with torch.random.fork_rng():  # construction must not perturb the caller's RNG stream
        net = InContextTransformer(cfg)
    net.load_state_dict(state)
    return PFNWeights(cfg, net, version=meta["version"], meta=meta["meta"])
