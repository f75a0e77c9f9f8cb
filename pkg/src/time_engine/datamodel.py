"""Core sample/dataset types and the train/val/test split rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

CLASSIFICATION = "classification"
REGRESSION = "regression"

# v2 size bounds; exceeding them is reported, never fatal
MAX_SAMPLES = 10_000
MAX_FEATURES = 500
MAX_CLASSES = 10


@dataclass(frozen=True)
class TabularRow:
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        missing = np.asarray(self.missing, dtype=bool)
        if values.ndim != 1 or values.shape != missing.shape:
            raise ValueError("values and missing must be 1-d arrays of equal length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)

    @property
    def d(self) -> int:
        return len(self.values)

    @classmethod
    def from_values(cls, values) -> "TabularRow":
        """NaN entries become missing cells."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isnan(values))


@dataclass(frozen=True)
class Target:
    kind: str
    class_index: Optional[int] = None
    real_value: Optional[float] = None

    def __post_init__(self):
        if self.kind == CLASSIFICATION:
            if self.class_index is None or self.real_value is not None or self.class_index < 0:
                raise ValueError("classification target needs a non-negative class_index only")
        elif self.kind == REGRESSION:
            if self.real_value is None or self.class_index is not None:
                raise ValueError("regression target needs a real_value only")
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def classification(cls, index: int) -> "Target":
        return cls(CLASSIFICATION, class_index=int(index))

    @classmethod
    def regression(cls, value: float) -> "Target":
        return cls(REGRESSION, real_value=float(value))

    @property
    def value(self):
        return self.class_index if self.kind == CLASSIFICATION else self.real_value


@dataclass(frozen=True)
class ImageRef:
    path: Optional[str] = None
    loaded: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.path is None and self.loaded is None:
            raise ValueError("ImageRef needs a path or a loaded array")
        if self.loaded is not None:
            arr = np.asarray(self.loaded, dtype=np.float32)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.ndim != 3 or arr.shape[2] not in (1, 3):
                raise ValueError(f"image must be H x W x {{1,3}}, got shape {arr.shape}")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError("image values must lie in [0, 1]")
            object.__setattr__(self, "loaded", arr)

    def load(self) -> np.ndarray:
        if self.loaded is not None:
            return self.loaded
        from .ingest import read_image

        return read_image(self.path)


@dataclass(frozen=True)
class MultimodalSample:
    image: ImageRef
    tabular: TabularRow
    target: Target
    id: str


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = "numeric"  # or "categorical"
    categories: Tuple[str, ...] = ()  # categorical code -> label, when known


@dataclass(frozen=True)
class MultimodalDataset:
    samples: Tuple[MultimodalSample, ...]
    schema: Tuple[Column, ...]
    task: str = CLASSIFICATION
    n_classes: int = 0
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "schema", tuple(self.schema))
        d = len(self.schema)
        for s in self.samples:
            if s.tabular.d != d:
                raise ValueError(f"sample {s.id} has {s.tabular.d} features, schema has {d}")
            if s.target.kind != self.task:
                raise ValueError(f"sample {s.id} has a {s.target.kind} target in a {self.task} dataset")
        if self.task == CLASSIFICATION:
            if self.n_classes < 2:
                raise ValueError("classification datasets need n_classes >= 2")
            bad = [s.id for s in self.samples if s.target.class_index >= self.n_classes]
            if bad:
                raise ValueError(f"class index out of range for samples {bad[:5]}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d(self) -> int:
        return len(self.schema)

    @property
    def feature_names(self) -> List[str]:
        return [c.name for c in self.schema]

    @cached_property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    @cached_property
    def values(self) -> np.ndarray:
        """(N, d) float array; NaN wherever the mask says missing."""
        if not self.samples:
            return np.zeros((0, self.d))
        v = np.stack([s.tabular.values for s in self.samples]).astype(np.float64)
        v[self.missing] = np.nan
        v.flags.writeable = False
        return v

    @cached_property
    def missing(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.d), dtype=bool)
        m = np.stack([s.tabular.missing for s in self.samples])
        m.flags.writeable = False
        return m

    @cached_property
    def targets(self) -> np.ndarray:
        dtype = np.int64 if self.task == CLASSIFICATION else np.float64
        return np.array([s.target.value for s in self.samples], dtype=dtype)

    def subset(self, indices: Sequence[int]) -> "MultimodalDataset":
        return MultimodalDataset(tuple(self.samples[i] for i in indices), self.schema,
                                 self.task, self.n_classes, self.name)

    def with_tabular(self, values: np.ndarray, missing: np.ndarray, name: Optional[str] = None
                     ) -> "MultimodalDataset":
        """Same images, targets and ids with replaced tabular cells."""
        samples = tuple(
            MultimodalSample(s.image, TabularRow(values[i], missing[i]), s.target, s.id)
            for i, s in enumerate(self.samples)
        )
        return MultimodalDataset(samples, self.schema, self.task, self.n_classes, name or self.name)

    def images(self, indices: Optional[Sequence[int]] = None) -> List[np.ndarray]:
        idx = range(len(self)) if indices is None else indices
        return [self.samples[i].image.load() for i in idx]


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(ds: MultimodalDataset) -> ValidationReport:
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    report = ValidationReport()
    if len(ds) > MAX_SAMPLES:
        report.violations.append(f"N exceeds {MAX_SAMPLES} ({len(ds)})")
    if ds.d > MAX_FEATURES:
        report.violations.append(f"d exceeds {MAX_FEATURES} ({ds.d})")
    if ds.task == CLASSIFICATION and ds.n_classes > MAX_CLASSES:
        report.violations.append(f"C exceeds {MAX_CLASSES} ({ds.n_classes})")
    for s in ds.samples:
        observed = s.tabular.values[~s.tabular.missing]
        if not np.all(np.isfinite(observed)):
            report.violations.append(f"non-finite observed value in sample {s.id}")
    seen = set()
    for i in ds.ids:
        if i in seen:
            report.violations.append(f"duplicate id {i}")
        seen.add(i)
    return report


@dataclass(frozen=True)
class SplitIndices:
    train: Tuple[int, ...]
    val: Tuple[int, ...]
    test: Tuple[int, ...]

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))

    def counts(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def check(self, n: int, require_val: bool = True) -> None:
        parts = [self.train, self.test] + ([self.val] if require_val or self.val else [])
        flat = [i for p in parts for i in p]
        if any(i < 0 or i >= n for i in flat):
            raise ValueError(f"split indices out of range for N={n}")
        if len(set(flat)) != len(flat):
            raise ValueError("split partitions overlap")
        if len(flat) != n:
            raise ValueError(f"split covers {len(flat)} of {n} samples")


def held_out_count(n: int, fraction: float = 0.2) -> int:
    # ceil, with a guard against float noise such as 0.2 * 9895 = 1979.0000000000002
    return math.ceil(round(fraction * n, 9))


def _allocate(sizes: np.ndarray, k: int) -> np.ndarray:
    """Split ``k`` draws across groups proportionally (largest remainder)."""
    quota = k * sizes / sizes.sum()
    take = np.floor(quota).astype(int)
    order = sorted(range(len(sizes)), key=lambda i: (-(quota[i] - take[i]), i))
    for i in order[: k - take.sum()]:
        take[i] += 1
    return np.minimum(take, sizes)


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int, labels: Optional[np.ndarray]
          ) -> np.ndarray:
    if labels is None:
        return np.sort(rng.choice(pool, size=k, replace=False))
    classes, sizes = np.unique(labels[pool], return_counts=True)
    take = _allocate(sizes, k)
    picked = [rng.choice(pool[labels[pool] == c], size=t, replace=False)
              for c, t in zip(classes, take)]
    return np.sort(np.concatenate(picked))


def split_dataset(ds: MultimodalDataset, seed: int, predefined: Optional[SplitIndices] = None,
                  stratify: bool = True, fraction: float = 0.2) -> SplitIndices:
    """80/20 train/test, then 20% of train held out for validation.

    Held-out counts are ceil(0.2 * n). A predefined split with a test
    partition is kept as is; only validation is carved from its train part
    when it has none.
    """
    n = len(ds)
    labels = ds.targets if (stratify and ds.task == CLASSIFICATION) else None
    rng = np.random.default_rng(seed)
    if predefined is not None:
        predefined.check(n, require_val=False)
        if predefined.val:
            return predefined
        train = np.array(predefined.train, dtype=int)
        val = _draw(rng, train, held_out_count(len(train), fraction), labels)
        return SplitIndices(tuple(np.setdiff1d(train, val)), tuple(val), predefined.test)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    everything = np.arange(n)
    test = _draw(rng, everything, held_out_count(n, fraction), labels)
    rest = np.setdiff1d(everything, test)
    val = _draw(rng, rest, held_out_count(len(rest), fraction), labels)
    train = np.setdiff1d(rest, val)
    return SplitIndices(tuple(train), tuple(val), tuple(test))
