import json

import numpy as np
import pytest
import torch

from time_engine.model import frozen_parameters, tensor_hash, trainable_parameters
from time_engine.train import (EarlyStopper, ModelInputs, TrainConfig, TrainingDivergence, config_hash,
                               load_checkpoint, lr_at_epoch, mean_loss, save_checkpoint, score,
                               train_model)

from helpers import build_model, separable_inputs


def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, 0) == 1.0e-3
    assert lr_at_epoch(cfg, 20) == pytest.approx(9.0e-4, rel=1e-12)
    assert lr_at_epoch(cfg, 99) == pytest.approx(6.561e-4, rel=1e-12)


def test_lr_piecewise_constant():
    cfg = TrainConfig()
    lrs = [lr_at_epoch(cfg, e) for e in range(100)]
    breaks = [e for e in range(1, 100) if lrs[e] != lrs[e - 1]]
    assert breaks == [20, 40, 60, 80]


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at_epoch(TrainConfig(), 100)
    with pytest.raises(ValueError):
        lr_at_epoch(TrainConfig(), -1)


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"decay": 0.0}, {"decay": 1.5},
                                    {"patience": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_early_stopper_constant_stream():
    stopper = EarlyStopper(patience=10)
    epoch = 0
    while not stopper.should_stop:
        epoch += 1
        stopper.update(epoch, 0.5)
    assert epoch == 11
    assert stopper.best_epoch == 1


def test_train_model_stops_on_constant_metric():
    train, val = separable_inputs(64, seed=1), separable_inputs(16, seed=2)
    m = build_model("cat")
    record = train_model(m, train, val, TrainConfig(epochs=50, patience=10), evaluate=lambda *_: 0.25)
    assert record.stopped_epoch == 11
    assert record.best_epoch == 1
    assert len(record.lr) == 11 and record.lr == [1e-3] * 11


def test_restored_parameters_are_best():
    train, val = separable_inputs(96, seed=1), separable_inputs(48, seed=2)
    m = build_model("sum")
    record = train_model(m, train, val, TrainConfig(epochs=30, patience=5))
    assert record.best_val == max(record.val_metric)
    assert score(m, val) == record.best_val
    assert record.val_metric[record.best_epoch - 1] == record.best_val


def test_separable_loss_halves():
    train, val = separable_inputs(128, seed=3), separable_inputs(32, seed=4)
    m = build_model("cat")
    record = train_model(m, train, val, TrainConfig(epochs=20, patience=20))
    assert mean_loss(m, train) < 0.5 * record.initial_train_loss


def test_regression_training():
    rng = np.random.default_rng(0)
    tab = torch.as_tensor(rng.normal(size=(96, 192)), dtype=torch.float32)
    y = tab[:, 0] * 2 + 1
    img = torch.as_tensor(rng.normal(size=(96, 16)), dtype=torch.float32)
    train, val = ModelInputs(y[:64], tab[:64], img[:64]), ModelInputs(y[64:], tab[64:], img[64:])
    m = build_model("sum", task="regression")
    record = train_model(m, train, val, TrainConfig(epochs=30, patience=30))
    assert record.metric == "mse"
    assert record.best_val == min(record.val_metric)
    assert mean_loss(m, train) < record.initial_train_loss


def test_same_seed_same_history():
    train, val = separable_inputs(96, seed=1), separable_inputs(32, seed=2)
    histories = []
    for _ in range(2):
        m = build_model("daft", seed=7)
        r = train_model(m, train, val, TrainConfig(epochs=6, seed=3))
        histories.append((r.train_loss, r.val_metric, tensor_hash(m.state_dict().items())))
    assert histories[0] == histories[1]


def test_nonfinite_loss_aborts():
    train, val = separable_inputs(64, seed=1), separable_inputs(16, seed=2)
    train.tab[5, 0] = float("nan")
    with pytest.raises(TrainingDivergence, match="epoch 1"):
        train_model(build_model("cat"), train, val, TrainConfig(epochs=3))


def test_optimizer_touches_trainable_set_only():
    train, val = separable_inputs(64, seed=1), separable_inputs(16, seed=2)
    m = build_model("daft", "frozen")
    outside = tensor_hash(frozen_parameters(m))
    # the DAFT output layer starts at zero, so its first layer has zero gradient on step one;
    # weight decay alone still moves it
    first = m.fusion.daft.bottleneck[0].weight.detach().clone()
    m.fusion.daft.bottleneck[2].weight.register_hook(lambda g: torch.zeros_like(g))
    m.fusion.daft.bottleneck[2].bias.register_hook(lambda g: torch.zeros_like(g))
    train_model(m, train, val, TrainConfig(epochs=1))
    assert tensor_hash(frozen_parameters(m)) == outside
    assert not torch.equal(m.fusion.daft.bottleneck[0].weight, first)


def test_checkpoint_roundtrip(tmp_path):
    train, val = separable_inputs(64, seed=1), separable_inputs(16, seed=2)
    m = build_model("max")
    r = train_model(m, train, val, TrainConfig(epochs=2))
    config = {"fusion": "max", "seed": 0}
    out = save_checkpoint(m, tmp_path / "ck", config, seed=0, epoch=r.best_epoch, val_metric=r.best_val)
    assert sorted(p.name for p in out.iterdir()) == ["config.json", "meta.json", "params.pt", "trainable.json"]
    assert json.loads((out / "config.json").read_text())["config_hash"] == config_hash(config)
    assert json.loads((out / "trainable.json").read_text()) == [n for n, _ in trainable_parameters(m)]
    fresh = build_model("max", seed=99)
    meta = load_checkpoint(fresh, out, config)
    assert meta["seed"] == 0 and meta["epoch"] == r.best_epoch
    assert tensor_hash(fresh.state_dict().items()) == tensor_hash(m.state_dict().items())
    with pytest.raises(ValueError, match="different config"):
        load_checkpoint(fresh, out, {"fusion": "sum", "seed": 0})


def test_run_record_serializes():
    train, val = separable_inputs(64, seed=1), separable_inputs(16, seed=2)
    r = train_model(build_model("cat"), train, val, TrainConfig(epochs=2))
    d = json.loads(r.to_json())
    assert d["config"]["weight_decay"] == 0.01 and d["config"]["patience"] == 10
    assert len(d["train_loss"]) == 2 and d["lr"] == [1e-3, 1e-3]
