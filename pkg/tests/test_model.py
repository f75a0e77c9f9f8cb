import numpy as np
import pytest
import torch

from time_engine.datamodel import split_dataset
from time_engine.encoders import ImageEncoder
from time_engine.ingest import Normalizer
from time_engine.model import TIMEModel, forward, frozen_parameters, tensor_hash, trainable_parameters
from time_engine.pfn import ContextSet
from time_engine.synthetic import make_synthetic_dataset
from time_engine.train import TrainConfig, mean_loss, train_model

from helpers import build_model, separable_inputs


def _names(m):
    return {n for n, _ in trainable_parameters(m)}


def test_pfn_tuned_trainable_set():
    m = build_model("daft", "tuned")
    names = _names(m)
    prefixes = {n.split(".")[0] for n in names}
    assert prefixes == {"image_encoder", "fusion", "head"}
    assert any(n.startswith("fusion.projection") for n in names)
    assert any(n.startswith("fusion.daft") for n in names)
    assert not any("pfn" in n for n, _ in m.named_parameters())


def test_pfn_frozen_excludes_image_encoder():
    m = build_model("sum", "frozen")
    names = _names(m)
    assert not any(n.startswith("image_encoder") for n in names)
    assert any(n.startswith("fusion.projection") for n in names)


def test_cat_frozen_is_head_only():
    assert _names(build_model("cat", "frozen")) == {"head.weight", "head.bias"}


def test_strict_probe_is_head_only():
    m = build_model("daft", "frozen", strict_probe=True)
    assert _names(m) == {"head.weight", "head.bias"}
    assert len(frozen_parameters(m)) > 0


def test_mlp_branch_trainable_in_both_modes():
    for mode in ("frozen", "tuned"):
        assert any(n.startswith("mlp.") for n in _names(build_model("max", mode, tabular="mlp")))


def test_zero_head_gives_uniform():
    m = build_model("cat", n_classes=4)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    p = m.predict(torch.randn(5, 192), torch.randn(5, 16))
    assert torch.allclose(p, torch.full((5, 4), 0.25))


def test_probabilities_sum_to_one():
    m = build_model("daft", n_classes=5)
    p = m.predict(torch.randn(50, 192) * 5, torch.randn(50, 16) * 5).double()
    assert (p.sum(1) - 1).abs().max().item() < 1e-6


def test_regression_shape():
    m = build_model("sum", task="regression")
    assert m(torch.randn(7, 192), torch.randn(7, 16)).shape == (7,)


def test_model_needs_a_branch():
    with pytest.raises(ValueError):
        TIMEModel("classification", 2, tabular=None, image_encoder=None)
    with pytest.raises(ValueError):
        TIMEModel("classification", 2, tabular="mlp", image_encoder=None)


def test_end_to_end_forward(pfn_weights):
    ds = make_synthetic_dataset(n=120, image_size=16)
    split = split_dataset(ds, 0)
    train = ds.subset(split.train)
    norm = Normalizer.fit(train)
    rows = norm.transform_arrays(train.values, train.missing)
    ctx = ContextSet(rows, train.missing, train.targets, n_classes=4)
    torch.manual_seed(0)
    m = TIMEModel("classification", 4, "pfn", ImageEncoder("tiny-cnn", 16), "daft", 32,
                  pfn=pfn_weights, normalizer=norm)
    batch = ds.subset(split.test)
    p1 = forward(m, batch, ctx)
    p2 = forward(m, batch, ctx)
    assert p1.shape == (len(batch), 4)
    assert np.array_equal(p1, p2)
    assert np.abs(p1.sum(1) - 1).max() < 1e-6
    with pytest.raises(ValueError):
        forward(m, batch, None)
    other = make_synthetic_dataset(n=10, d=6, image_size=16)
    with pytest.raises(ValueError):
        forward(m, other, ctx)


def _rising_metric():
    # every epoch "improves", so the final parameters are the ones kept
    calls = []

    def evaluate(*_):
        calls.append(1)
        return float(len(calls))
    return evaluate


@pytest.mark.parametrize("mode", ["frozen", "tuned"])
@pytest.mark.parametrize("fusion", ["cat", "sum", "max", "daft"])
def test_training_partition_and_loss_decrease(fusion, mode):
    raw = mode == "tuned"
    train = separable_inputs(n=96, seed=1, raw_images=raw)
    val = separable_inputs(n=32, seed=2, raw_images=raw)
    m = build_model(fusion, mode)
    frozen_before = tensor_hash(frozen_parameters(m))
    trainable_before = {n: p.detach().clone() for n, p in trainable_parameters(m)}
    initial = mean_loss(m, train)
    cfg = TrainConfig(epochs=5, patience=100, batch_size=32, lr=1e-3)
    record = train_model(m, train, val, cfg, evaluate=_rising_metric())
    assert record.best_epoch == 5
    assert tensor_hash(frozen_parameters(m)) == frozen_before
    assert any(not torch.equal(p, trainable_before[n]) for n, p in trainable_parameters(m))
    assert mean_loss(m, train) < initial
