import numpy as np
import pytest
import torch
from hypothesis import settings

from time_engine.datamodel import (Column, ImageRef, MultimodalDataset, MultimodalSample, TabularRow,
                                   Target)

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def pfn_weights():
    from time_engine.pfn.build import load_default

    return load_default()


def make_dataset(values, missing=None, labels=None, n_classes=2, kinds=None, image_size=8, seed=0,
                 task="classification"):
    """Small in-memory dataset with random images."""
    values = np.asarray(values, dtype=np.float64)
    n, d = values.shape
    if missing is None:
        missing = np.isnan(values)
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = np.arange(n) % n_classes
    kinds = kinds or ["numeric"] * d
    samples = []
    for i in range(n):
        target = (Target.classification(int(labels[i])) if task == "classification"
                  else Target.regression(float(labels[i])))
        img = rng.random((image_size, image_size, 3)).astype(np.float32)
        samples.append(MultimodalSample(ImageRef(loaded=img), TabularRow(values[i], missing[i]),
                                        target, f"s{i}"))
    schema = tuple(Column(f"f{j}", kinds[j]) for j in range(d))
    return MultimodalDataset(tuple(samples), schema, task, n_classes if task == "classification" else 0)


@pytest.fixture
def dataset_factory():
    return make_dataset


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
