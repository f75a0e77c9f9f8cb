import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from time_engine.datamodel import (ImageRef, SplitIndices, TabularRow, Target, held_out_count,
                                   split_dataset, validate_dataset)
from time_engine.synthetic import make_synthetic_dataset

from conftest import make_dataset


def _sized(n, n_classes=2):
    return make_dataset(np.zeros((n, 2)), n_classes=n_classes, image_size=2)


def test_tabular_row_shapes():
    row = TabularRow.from_values([1.0, np.nan, 3.0])
    assert row.d == 3
    assert row.missing.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        TabularRow(np.zeros(3), np.zeros(2, dtype=bool))


def test_target_payloads():
    assert Target.classification(2).value == 2
    assert Target.regression(1.5).value == 1.5
    with pytest.raises(ValueError):
        Target("classification", class_index=1, real_value=1.0)
    with pytest.raises(ValueError):
        Target("regression")
    with pytest.raises(ValueError):
        Target("ranking", class_index=0)


def test_image_ref_bounds():
    ImageRef(loaded=np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ImageRef(loaded=np.full((4, 4, 3), 1.5))
    with pytest.raises(ValueError):
        ImageRef(loaded=np.zeros((4, 4, 2)))
    with pytest.raises(ValueError):
        ImageRef()


def test_dataset_rejects_out_of_range_class():
    with pytest.raises(ValueError):
        make_dataset(np.zeros((4, 2)), labels=[0, 1, 2, 0], n_classes=2)


def test_validate_within_bounds_ok():
    ds = make_dataset(np.random.default_rng(0).normal(size=(100, 5)), n_classes=2, image_size=2)
    assert validate_dataset(ds).ok


def test_validate_flags_oversized_dataset():
    report = validate_dataset(_sized(14652))
    assert not report.ok
    assert any("N exceeds 10000" in v for v in report.violations)


def test_validate_flags_nan_under_observed_mask():
    values = np.ones((5, 3))
    values[2, 1] = np.nan
    ds = make_dataset(values, missing=np.zeros((5, 3), dtype=bool), image_size=2)
    report = validate_dataset(ds)
    assert any("non-finite" in v for v in report.violations)


def test_validate_flags_duplicate_ids_and_bounds():
    ds = make_dataset(np.zeros((6, 2)), image_size=2)
    dup = type(ds)(ds.samples + ds.samples[:1], ds.schema, ds.task, ds.n_classes)
    assert any("duplicate id" in v for v in validate_dataset(dup).violations)
    many = make_dataset(np.zeros((12, 2)), n_classes=12, image_size=2)
    assert any("C exceeds 10" in v for v in validate_dataset(many).violations)
    wide = make_dataset(np.zeros((2, 501)), image_size=1)
    assert any("d exceeds 500" in v for v in validate_dataset(wide).violations)


def test_validate_empty_dataset_errors():
    ds = make_dataset(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        validate_dataset(ds)


@pytest.mark.parametrize("n,expected", [
    (14652, (9376, 2345, 2931)),
    (820, (524, 132, 164)),
    (2298, (1470, 368, 460)),
    (12369, (7916, 1979, 2474)),
    (10, (6, 2, 2)),
])
def test_split_counts(n, expected):
    ds = _sized(n)
    split = split_dataset(ds, seed=0)
    assert split.counts() == expected
    split.check(n)


def test_split_rule_brute_force():
    # independent oracle: integer arithmetic, no floats
    for n in range(5, 2001):
        test = -(-n // 5)
        val = -(-(n - test) // 5)
        assert held_out_count(n) == test
        assert held_out_count(n - test) == val


@pytest.mark.parametrize("stratify", [True, False])
def test_split_partitions_every_size(stratify):
    for n in list(range(5, 60)) + [97, 500, 1999, 2000]:
        split = split_dataset(_sized(n, n_classes=3), seed=n, stratify=stratify)
        test = math.ceil(n / 5)
        assert len(split.test) == test
        assert len(split.val) == math.ceil((n - test) / 5)
        assert sorted(split.train + split.val + split.test) == list(range(n))


def test_split_deterministic_and_seed_dependent():
    ds = _sized(200)
    assert split_dataset(ds, 3) == split_dataset(ds, 3)
    assert split_dataset(ds, 3) != split_dataset(ds, 4)


def test_split_stratified_keeps_classes():
    ds = make_synthetic_dataset(n=400, image_size=4)
    split = split_dataset(ds, 0)
    for part in (split.train, split.val, split.test):
        assert set(ds.targets[list(part)]) == {0, 1, 2, 3}


def test_split_predefined():
    ds = _sized(20)
    pre = SplitIndices(tuple(range(15)), (), tuple(range(15, 20)))
    split = split_dataset(ds, 0, predefined=pre)
    assert split.test == pre.test
    assert len(split.val) == 3
    assert sorted(split.train + split.val) == list(range(15))
    full = SplitIndices(tuple(range(10)), tuple(range(10, 15)), tuple(range(15, 20)))
    assert split_dataset(ds, 0, predefined=full) == full


def test_split_rejects_bad_predefined_and_tiny():
    ds = _sized(20)
    with pytest.raises(ValueError):
        split_dataset(ds, 0, SplitIndices(tuple(range(15)), (), tuple(range(14, 20))))
    with pytest.raises(ValueError):
        split_dataset(ds, 0, SplitIndices(tuple(range(15)), (), (15, 16, 99)))
    with pytest.raises(ValueError):
        split_dataset(_sized(4), 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.data())
def test_values_nan_under_mask(vals, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(vals), max_size=len(vals)))
    ds = make_dataset(np.array([vals]), missing=np.array([mask]), image_size=1)
    assert np.array_equal(np.isnan(ds.values[0]), np.array(mask))
