import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from time_engine.datamodel import Column
from time_engine.ingest import (Manifest, ManifestError, Normalizer, apply_imputer, fit_imputer,
                                load_manifest, read_image, read_split_column)

from conftest import make_dataset


def _write_manifest(tmp_path, rows, header="id,image_path,target,age,color", images=True):
    if images:
        for i in range(len(rows)):
            Image.fromarray(np.full((6, 5, 3), 40 * (i % 6), dtype=np.uint8)).save(tmp_path / f"im{i}.png")
    path = tmp_path / "m.csv"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def test_load_complete_manifest(tmp_path):
    csv = _write_manifest(tmp_path, ["a,im0.png,0,31,red", "b,im1.png,1,40,blue", "c,im2.png,0,22,red"])
    ds = load_manifest(Manifest(csv, categorical=["color"]))
    assert len(ds) == 3
    assert not ds.missing.any()
    assert ds.feature_names == ["age", "color"]
    assert ds.schema[1] == Column("color", "categorical", ("red", "blue"))
    assert ds.values[:, 1].tolist() == [0, 1, 0]
    img = ds.samples[1].image.load()
    assert img.shape == (6, 5, 3) and np.allclose(img, 40 / 255)


def test_empty_and_nan_cells_are_missing(tmp_path):
    csv = _write_manifest(tmp_path, ["a,im0.png,0,,red", "b,im1.png,1,NaN,blue", "c,im2.png,0,5,nan"])
    ds = load_manifest(Manifest(csv, categorical=["color"]))
    assert ds.missing.tolist() == [[True, False], [True, False], [False, True]]
    assert np.isnan(ds.values[0, 0])


def test_missing_image_names_path(tmp_path):
    csv = _write_manifest(tmp_path, ["a,im0.png,0,1,red", "b,ghost.png,1,2,blue"], images=False)
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "im0.png")
    with pytest.raises(FileNotFoundError, match="ghost.png"):
        load_manifest(Manifest(csv, categorical=["color"]))


def test_malformed_row_names_row_number(tmp_path):
    csv = _write_manifest(tmp_path, ["a,im0.png,0,1,red", "b,im1.png,1,2"])
    with pytest.raises(ManifestError, match="row 3"):
        load_manifest(Manifest(csv, categorical=["color"]))
    csv = _write_manifest(tmp_path, ["a,im0.png,0,old,red"])
    with pytest.raises(ManifestError, match="row 2"):
        load_manifest(Manifest(csv, categorical=["color"]))


def test_missing_csv(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_manifest(Manifest(tmp_path / "nope.csv"))


def test_string_labels_and_regression(tmp_path):
    csv = _write_manifest(tmp_path, ["a,im0.png,cat,1,red", "b,im1.png,dog,2,red"])
    ds = load_manifest(Manifest(csv, categorical=["color"]))
    assert ds.targets.tolist() == [0, 1] and ds.n_classes == 2
    csv = _write_manifest(tmp_path, ["a,im0.png,1.5,1,red", "b,im1.png,-2,2,red"])
    ds = load_manifest(Manifest(csv, categorical=["color"], task="regression"))
    assert ds.targets.tolist() == [1.5, -2.0]


def test_split_column(tmp_path):
    rows = [f"s{i},im{i}.png,{i % 2},{i},{'train' if i < 6 else 'test'}" for i in range(8)]
    csv = _write_manifest(tmp_path, rows, header="id,image_path,target,x,split")
    m = Manifest(csv, split_column="split")
    ds = load_manifest(m)
    assert ds.feature_names == ["x"]
    split = read_split_column(m)
    assert split.train == tuple(range(6)) and split.test == (6, 7) and split.val == ()


def test_grayscale_image(tmp_path):
    Image.fromarray(np.full((3, 4), 255, dtype=np.uint8)).save(tmp_path / "g.png")
    arr = read_image(tmp_path / "g.png")
    assert arr.shape == (3, 4, 1) and arr.max() == 1.0


# --- imputer -----------------------------------------------------------------

def test_median_odd_and_even():
    ds = make_dataset(np.array([[1.0, 1.0], [3.0, 2.0], [2.0, 3.0], [np.nan, 4.0]]), image_size=1)
    assert fit_imputer(ds).medians.tolist() == [2.0, 2.5]


def test_all_missing_column_warns():
    ds = make_dataset(np.array([[np.nan, 1.0], [np.nan, 2.0]]), image_size=1)
    with pytest.warns(UserWarning, match="entirely missing"):
        imp = fit_imputer(ds)
    assert imp.fill[0] == 0.0


def test_categorical_mode_first_occurrence_tie():
    ds = make_dataset(np.array([[2.0], [1.0], [1.0], [2.0], [3.0]]), kinds=["categorical"], image_size=1)
    assert fit_imputer(ds).fill[0] == 2.0


def test_apply_by_hand_and_identity():
    train = make_dataset(np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]]), image_size=1)
    imp = fit_imputer(train)
    assert imp.medians.tolist() == [2.0, 5.0]
    ds = make_dataset(np.array([[np.nan, 7.0]]), image_size=1)
    out = apply_imputer(imp, ds)
    assert out.values.tolist() == [[2.0, 7.0]] and not out.missing.any()
    same = apply_imputer(imp, train)
    assert np.array_equal(same.values, train.values)
    assert same.ids == train.ids


def test_imputer_fixed_point():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(41, 3))
    v[rng.random(v.shape) < 0.3] = np.nan
    train = make_dataset(v, image_size=1)
    imp = fit_imputer(train)
    again = fit_imputer(apply_imputer(imp, train))
    assert np.array_equal(again.fill, imp.fill)


def test_apply_schema_mismatch():
    imp = fit_imputer(make_dataset(np.ones((3, 2)), image_size=1))
    with pytest.raises(ValueError):
        apply_imputer(imp, make_dataset(np.ones((3, 3)), image_size=1))


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6)),
       st.data())
def test_imputer_never_alters_observed(values, data):
    mask = data.draw(arrays(bool, values.shape))
    ds = make_dataset(values, missing=mask, image_size=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        imp = fit_imputer(ds)
    out = apply_imputer(imp, ds)
    assert np.array_equal(out.values[~mask], values[~mask])
    assert not out.missing.any()
    for j in range(values.shape[1]):
        assert np.all(out.values[mask[:, j], j] == imp.fill[j])
        obs = values[~mask[:, j], j]
        if len(obs):
            assert imp.fill[j] == np.median(obs)


# --- normalizer --------------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(3, 40), st.integers(1, 4)),
              elements=st.floats(-1e4, 1e4)), st.data())
def test_normalizer_standardizes_observed(values, data):
    mask = data.draw(arrays(bool, values.shape))
    ds = make_dataset(values, missing=mask, image_size=1)
    norm = Normalizer.fit(ds)
    out = norm.transform_arrays(ds.values, ds.missing)
    assert np.array_equal(np.isnan(out), mask)
    for j in range(values.shape[1]):
        obs = out[~mask[:, j], j]
        if norm.constant[j] or len(obs) < 2:
            continue
        assert abs(obs.mean()) < 1e-6
        assert abs(obs.std() - 1) < 1e-6


def test_normalizer_large_constant_column():
    # float rounding leaves a tiny nonzero spread; it must not be amplified to +-1
    values = np.full((12, 1), 3640.99299341)
    norm = Normalizer.fit(make_dataset(values, image_size=1))
    assert norm.constant[0]
    assert np.allclose(norm.transform_arrays(values, np.zeros_like(values, dtype=bool)), 0.0)


def test_normalizer_unknown_category():
    train = make_dataset(np.array([[5.0], [7.0], [5.0]]), kinds=["categorical"], image_size=1)
    norm = Normalizer.fit(train)
    assert norm.cardinalities() == {0: 3}
    out = norm.transform_arrays(np.array([[7.0], [9.0]]), np.zeros((2, 1), dtype=bool))
    assert out[:, 0].tolist() == [1.0, 2.0]
