"""Shared builders for model/train tests."""
import numpy as np
import torch

from time_engine.encoders import ImageEncoder, MLPTabularEncoder
from time_engine.model import TIMEModel
from time_engine.train import ModelInputs


def separable_inputs(n=128, n_classes=3, d_img=16, seed=0, raw_images=False):
    """Tabular embeddings whose class is a linear function; images share the label."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n)
    centers = rng.normal(0, 3, (n_classes, 192))
    tab = centers[y] + rng.normal(0, 1, (n, 192))
    t = torch.as_tensor(tab, dtype=torch.float32)
    yt = torch.as_tensor(y)
    if raw_images:
        imgs = [np.clip(0.5 + 0.1 * rng.standard_normal((16, 16, 3)) + 0.3 * (c - 1), 0, 1).astype(np.float32)
                for c in y]
        return ModelInputs(yt, t, None, imgs, image_size=32)
    img = rng.normal(0, 1, (n, d_img)) + np.eye(n_classes, d_img)[y] * 2
    return ModelInputs(yt, t, torch.as_tensor(img, dtype=torch.float32))


def build_model(fusion="cat", mode="frozen", tabular="pfn", n_classes=3, d_img=16, k=32,
                strict_probe=False, task="classification", seed=0, image_size=32):
    torch.manual_seed(seed)
    enc = ImageEncoder("tiny-cnn", out_dim=d_img, mode=mode, image_size=image_size)
    mlp = MLPTabularEncoder(192) if tabular == "mlp" else None
    n_out = n_classes if task == "classification" else 1
    return TIMEModel(task, n_out, tabular, enc, fusion, k, mlp=mlp, strict_probe=strict_probe)
