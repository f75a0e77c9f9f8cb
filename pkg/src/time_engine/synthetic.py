"""Built-in synthetic tabular-image dataset.

The label combines one tabular bit and one image bit:
``label = 2 * (latent > 0) + (square is red)``. Feature 0 is the latent
itself, features 1-3 are noisy proxies of it and features 4.. are pure
noise. Each image is a noisy background with a coloured square at a random
position. Neither modality alone can exceed 50% accuracy on 4 classes.
"""
from __future__ import annotations

import numpy as np

from .datamodel import Column, ImageRef, MultimodalDataset, MultimodalSample, TabularRow, Target

INFORMATIVE = 0


def make_synthetic_dataset(n: int = 2000, d: int = 8, image_size: int = 32, seed: int = 0,
                           proxy_noise: float = 0.6, n_proxies: int = 3,
                           name: str = "synthetic") -> MultimodalDataset:
    if d < 1 + n_proxies:
        raise ValueError(f"d must be at least {1 + n_proxies}")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal(n)
    x = rng.standard_normal((n, d))
    x[:, INFORMATIVE] = latent
    x[:, 1:1 + n_proxies] = latent[:, None] + proxy_noise * rng.standard_normal((n, n_proxies))
    tab_bit = (latent > 0).astype(int)
    img_bit = rng.integers(0, 2, n)
    labels = 2 * tab_bit + img_bit

    side = max(image_size // 3, 2)
    samples = []
    for i in range(n):
        img = np.clip(0.5 + 0.1 * rng.standard_normal((image_size, image_size, 3)), 0, 1)
        r, c = rng.integers(0, image_size - side + 1, 2)
        colour = (0.9, 0.2, 0.2) if img_bit[i] else (0.2, 0.2, 0.9)
        img[r:r + side, c:c + side] = colour
        samples.append(MultimodalSample(
            ImageRef(path=None, loaded=img.astype(np.float32)),
            TabularRow(x[i], np.zeros(d, dtype=bool)),
            Target.classification(int(labels[i])),
            f"{name}-{i:05d}",
        ))
    schema = tuple(Column(f"x{j}") for j in range(d))
    return MultimodalDataset(tuple(samples), schema, "classification", 4, name)
