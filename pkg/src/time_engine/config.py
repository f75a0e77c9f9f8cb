"""Versioned JSON experiment configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .fusion import STRATEGIES
from .train import TrainConfig, config_hash

SCHEMA_VERSION = 1
TABULAR_ENCODERS = ("pfn", "mlp")
IMAGE_BACKBONES = ("tiny-cnn", "pretrained-cnn")
MODES = ("frozen", "tuned")
MISSING_POLICIES = ("native", "median-impute")
BASELINES = ("image-only", "pfn-only", "mlp-only")
MECHANISMS = ("mcar", "mnar")
SCOPES = ("all-splits", "train-only")


class ConfigError(ValueError):
    pass


def _strict(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**data)


def _as_list(value, where: str) -> List:
    if isinstance(value, (str, int, float)) or value is None:
        return [value]
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}: expected a value or a non-empty list")
    return list(value)


@dataclass
class DatasetSpec:
    """Either a manifest description or parameters of the built-in synthetic set."""

    manifest: Optional[Dict[str, Any]] = None
    synthetic: Optional[Dict[str, Any]] = None
    name: Optional[str] = None

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("datasets[]: give exactly one of 'manifest' or 'synthetic'")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.manifest is not None:
            return self.manifest.get("name") or Path(self.manifest["csv"]).stem
        return self.synthetic.get("name", "synthetic")


@dataclass
class MaskConfig:
    ratios: List[float] = field(default_factory=lambda: [0.0])
    scope: str = "all-splits"
    mechanism: str = "mcar"
    columns: Optional[List[int]] = None  # restrict masking to these feature indices

    def __post_init__(self):
        self.ratios = [float(r) for r in _as_list(self.ratios, "mask.ratios")]
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ConfigError("mask.ratios: every ratio must lie in [0, 1]")
        if self.scope not in SCOPES:
            raise ConfigError(f"mask.scope: must be one of {SCOPES}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mask.mechanism: must be one of {MECHANISMS}")


@dataclass
class ExperimentConfig:
    datasets: List[DatasetSpec]
    schema_version: int = SCHEMA_VERSION
    tabular_encoder: List[str] = field(default_factory=lambda: ["pfn"])
    image_encoder: str = "tiny-cnn"
    image_dim: int = 64
    image_weights: Optional[str] = None
    fusion: List[str] = field(default_factory=lambda: ["cat"])
    mode: List[str] = field(default_factory=lambda: ["frozen"])
    missing_policy: List[str] = field(default_factory=lambda: ["native"])
    baselines: List[str] = field(default_factory=list)
    mask: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split_seed: Optional[int] = None  # None: split with the run seed
    stratify: bool = True
    k: int = 192
    strict_probe: bool = False
    pfn_weights: Optional[str] = None  # None: bundled desk-scale weights
    n_folds: int = 5
    output_dir: str = "runs"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        self.tabular_encoder = _as_list(self.tabular_encoder, "tabular_encoder")
        self.fusion = _as_list(self.fusion, "fusion")
        self.mode = _as_list(self.mode, "mode")
        self.missing_policy = _as_list(self.missing_policy, "missing_policy")
        self.seeds = [int(s) for s in _as_list(self.seeds, "seeds")]
        for name, values, allowed in (("tabular_encoder", self.tabular_encoder, TABULAR_ENCODERS),
                                      ("fusion", self.fusion, STRATEGIES),
                                      ("mode", self.mode, MODES),
                                      ("missing_policy", self.missing_policy, MISSING_POLICIES),
                                      ("baselines", self.baselines, BASELINES)):
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigError(f"{name}: {bad} not in {allowed}")
        if self.image_encoder not in IMAGE_BACKBONES:
            raise ConfigError(f"image_encoder: must be one of {IMAGE_BACKBONES}")
        uses_mlp = "mlp" in self.tabular_encoder or "mlp-only" in self.baselines
        if uses_mlp and "native" in self.missing_policy:
            raise ConfigError("missing_policy: the mlp tabular encoder cannot take raw missing "
                              "cells; use 'median-impute'")
        if not self.datasets:
            raise ConfigError("datasets: at least one dataset is required")
        if self.image_dim < 1 or self.k < 1 or self.n_folds < 2:
            raise ConfigError("image_dim and k must be >= 1, n_folds >= 2")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        if not isinstance(data.get("datasets"), list):
            raise ConfigError("datasets: expected a list")
        data["datasets"] = [_strict(DatasetSpec, d, f"datasets[{i}]")
                            for i, d in enumerate(data["datasets"])]
        if "mask" in data:
            data["mask"] = _strict(MaskConfig, data["mask"], "mask")
        if "train" in data:
            try:
                data["train"] = _strict(TrainConfig, data["train"], "train")
            except ValueError as exc:
                raise ConfigError(f"train: {exc}") from None
        try:
            return _strict(cls, data, "config")
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = cls.from_dict(data)
        # relative manifest paths resolve against the config file
        for ds in cfg.datasets:
            if ds.manifest is not None and not Path(ds.manifest["csv"]).is_absolute():
                ds.manifest = dict(ds.manifest, csv=str(path.parent / ds.manifest["csv"]))
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return config_hash(d)
