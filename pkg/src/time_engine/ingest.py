"""Manifest loading, tabular normalization and the median-imputation baseline."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import (CLASSIFICATION, REGRESSION, Column, ImageRef, MultimodalDataset,
                        MultimodalSample, SplitIndices, TabularRow, Target)

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "nan"}


class ManifestError(ValueError):
    pass


@dataclass
class Manifest:
    csv: Path
    id_column: str = "id"
    image_column: str = "image_path"
    target_column: str = "target"
    features: Optional[List[str]] = None  # default: every remaining column
    categorical: List[str] = field(default_factory=list)
    task: str = CLASSIFICATION
    split_column: Optional[str] = None  # values train / val / test
    name: Optional[str] = None

    def __post_init__(self):
        self.csv = Path(self.csv)
        roles = [self.id_column, self.image_column, self.target_column]
        if len(set(roles)) != 3:
            raise ManifestError("id, image and target columns must be distinct")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ManifestError(f"unknown task {self.task!r}")

    @classmethod
    def from_dict(cls, d: Dict, base: Optional[Path] = None) -> "Manifest":
        d = dict(d)
        path = Path(d.pop("csv"))
        if base is not None and not path.is_absolute():
            path = base / path
        return cls(csv=path, **d)


def is_missing_token(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def read_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file to an H x W x {1,3} float32 array in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("L") if im.mode in ("L", "I", "I;16", "1") else im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr[:, :, None] if arr.ndim == 2 else arr


def _read_rows(manifest: Manifest) -> Tuple[List[str], List[List[str]]]:
    if not manifest.csv.exists():
        raise FileNotFoundError(f"manifest csv not found: {manifest.csv}")
    with open(manifest.csv, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{manifest.csv} is empty") from None
        rows = list(reader)
    return header, rows


def load_manifest(manifest: Manifest) -> MultimodalDataset:
    header, rows = _read_rows(manifest)
    col = {name: i for i, name in enumerate(header)}
    for role in (manifest.id_column, manifest.image_column, manifest.target_column):
        if role not in col:
            raise ManifestError(f"column {role!r} not in manifest header")
    reserved = {manifest.id_column, manifest.image_column, manifest.target_column, manifest.split_column}
    features = manifest.features or [h for h in header if h not in reserved]
    if not features:
        raise ManifestError("manifest has no feature columns")
    unknown = [f for f in features + list(manifest.categorical) if f not in col]
    if unknown:
        raise ManifestError(f"feature columns not in header: {unknown}")
    categorical = set(manifest.categorical)
    cat_codes: Dict[str, Dict[str, int]] = {f: {} for f in features if f in categorical}
    root = manifest.csv.parent

    raw_targets = []
    parsed = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ManifestError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        values = np.zeros(len(features))
        missing = np.zeros(len(features), dtype=bool)
        for j, name in enumerate(features):
            cell = row[col[name]]
            if is_missing_token(cell):
                missing[j] = True
                values[j] = np.nan
            elif name in cat_codes:
                values[j] = cat_codes[name].setdefault(cell.strip(), len(cat_codes[name]))
            else:
                try:
                    values[j] = float(cell)
                except ValueError:
                    raise ManifestError(f"row {lineno}: non-numeric value {cell!r} in "
                                        f"column {name!r}") from None
        target = row[col[manifest.target_column]].strip()
        if is_missing_token(target):
            raise ManifestError(f"row {lineno}: missing target")
        image_path = root / row[col[manifest.image_column]]
        if not image_path.exists():
            raise FileNotFoundError(f"row {lineno}: image not found: {image_path}")
        raw_targets.append(target)
        parsed.append((row[col[manifest.id_column]], str(image_path), values, missing))

    if manifest.task == CLASSIFICATION:
        labels = sorted(set(raw_targets), key=lambda t: (not _is_int(t), int(t) if _is_int(t) else 0, t))
        if all(_is_int(t) for t in labels) and [int(t) for t in labels] == list(range(len(labels))):
            index = {t: int(t) for t in labels}
        else:
            index = {t: i for i, t in enumerate(labels)}
        targets = [Target.classification(index[t]) for t in raw_targets]
        n_classes = max(len(labels), 2)
    else:
        try:
            targets = [Target.regression(float(t)) for t in raw_targets]
        except ValueError as exc:
            raise ManifestError(f"non-numeric regression target: {exc}") from None
        n_classes = 0

    samples = tuple(
        MultimodalSample(ImageRef(path=p), TabularRow(v, m), t, sid)
        for (sid, p, v, m), t in zip(parsed, targets)
    )
    schema = tuple(
        Column(f, "categorical", tuple(cat_codes[f])) if f in cat_codes else Column(f)
        for f in features
    )
    name = manifest.name or manifest.csv.stem
    return MultimodalDataset(samples, schema, manifest.task, n_classes, name)


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


def read_split_column(manifest: Manifest) -> Optional[SplitIndices]:
    """Predefined partition from the manifest's split column, if it has one."""
    if not manifest.split_column:
        return None
    header, rows = _read_rows(manifest)
    if manifest.split_column not in header:
        raise ManifestError(f"split column {manifest.split_column!r} not in header")
    j = header.index(manifest.split_column)
    parts: Dict[str, List[int]] = {"train": [], "val": [], "test": []}
    for i, row in enumerate(r for r in rows if r):
        tag = row[j].strip().lower()
        if tag not in parts:
            raise ManifestError(f"row {i + 2}: split tag {row[j]!r} is not train/val/test")
        parts[tag].append(i)
    return SplitIndices(parts["train"], parts["val"], parts["test"])


# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Z-scores numeric columns and re-codes categorical ones from train statistics.

    Categorical outputs are integer codes into the training categories; a
    code never seen in training maps to ``unknown_index[j]``.
    """

    kinds: List[str]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray
    category_maps: Dict[int, Dict[int, int]]

    @classmethod
    def fit(cls, train: MultimodalDataset) -> "Normalizer":
        kinds = [c.kind for c in train.schema]
        values, missing = train.values, train.missing
        d = train.d
        mean, std = np.zeros(d), np.ones(d)
        constant = np.zeros(d, dtype=bool)
        maps: Dict[int, Dict[int, int]] = {}
        for j in range(d):
            obs = values[~missing[:, j], j]
            if kinds[j] == "categorical":
                maps[j] = {}
                for v in obs:
                    maps[j].setdefault(int(v), len(maps[j]))
                continue
            if len(obs):
                mean[j] = obs.mean()
                s = obs.std()
                # relative threshold: rounding alone leaves ~1e-16*|mean| of spread
                if s > 1e-9 * max(1.0, abs(mean[j])):
                    std[j] = s
                else:
                    constant[j] = True
            else:
                constant[j] = True
        return cls(kinds, mean, std, constant, maps)

    def unknown_index(self, j: int) -> int:
        return len(self.category_maps[j])

    def cardinalities(self) -> Dict[int, int]:
        """Embedding-table sizes per categorical column, UNKNOWN included."""
        return {j: len(m) + 1 for j, m in self.category_maps.items()}

    def transform_arrays(self, values: np.ndarray, missing: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=np.float64)
        for j, kind in enumerate(self.kinds):
            col = out[:, j]
            obs = ~missing[:, j]
            if kind == "categorical":
                m = self.category_maps[j]
                col[obs] = [m.get(int(v), self.unknown_index(j)) for v in col[obs]]
            else:
                col[obs] = (col[obs] - self.mean[j]) / self.std[j]
        out[missing] = np.nan
        return out

    def transform(self, ds: MultimodalDataset) -> MultimodalDataset:
        if [c.kind for c in ds.schema] != self.kinds:
            raise ValueError("dataset schema does not match the fitted normalizer")
        return ds.with_tabular(self.transform_arrays(ds.values, ds.missing), ds.missing)


@dataclass
class MedianImputer:
    columns: Tuple[Column, ...]
    fill: np.ndarray

    @property
    def medians(self) -> np.ndarray:
        return self.fill


def fit_imputer(train: MultimodalDataset) -> MedianImputer:
    if len(train) == 0:
        raise ValueError("cannot fit an imputer on an empty dataset")
    fill = np.zeros(train.d)
    for j, column in enumerate(train.schema):
        obs = train.values[~train.missing[:, j], j]
        if len(obs) == 0:
            warnings.warn(f"column {column.name!r} is entirely missing; filling with 0")
            fill[j] = 0.0
        elif column.kind == "categorical":
            counts: Dict[float, int] = {}
            for v in obs:  # dict keeps first-occurrence order, so ties go to the earliest
                counts[v] = counts.get(v, 0) + 1
            fill[j] = max(counts, key=counts.get)
        else:
            fill[j] = float(np.median(obs))
    return MedianImputer(train.schema, fill)


def apply_imputer(imp: MedianImputer, ds: MultimodalDataset) -> MultimodalDataset:
    if tuple((c.name, c.kind) for c in ds.schema) != tuple((c.name, c.kind) for c in imp.columns):
        raise ValueError("dataset schema does not match the fitted imputer")
    values = np.where(ds.missing, imp.fill[None, :], ds.values)
    return ds.with_tabular(values, np.zeros_like(ds.missing))
