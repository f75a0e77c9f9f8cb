"""Image backbones and the MLP tabular baseline."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pfn.network import EMBED_DIM

logger = logging.getLogger(__name__)
_warned_paths = set()

IMAGE_SIZE = 256
# ImageNet channel statistics; applied after resizing
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)


def preprocessing_info(size: int = IMAGE_SIZE) -> Dict:
    """Image preprocessing constants, stored with every checkpoint."""
    return {"size": size, "mean": list(CHANNEL_MEAN), "std": list(CHANNEL_STD),
            "interpolation": "bilinear, antialiased when downscaling", "augmentation": None}


def preprocess_images(images: Sequence[np.ndarray], size: int = IMAGE_SIZE) -> torch.Tensor:
    """H x W x {1,3} arrays in [0, 1] -> normalized (B, 3, size, size) tensor."""
    out = []
    for img in images:
        t = torch.as_tensor(np.asarray(img, dtype=np.float32))
        if t.ndim == 2:
            t = t[:, :, None]
        t = t.permute(2, 0, 1)
        if t.shape[0] == 1:
            t = t.expand(3, -1, -1)
        if t.shape[1:] != (size, size):
            t = F.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=False,
                              antialias=t.shape[1] > size or t.shape[2] > size)[0]
        out.append(t)
    batch = torch.stack(out)
    mean = torch.tensor(CHANNEL_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CHANNEL_STD).view(1, 3, 1, 1)
    return (batch - mean) / std


class TinyCNN(nn.Module):
    """Three conv blocks; the patchifying stem keeps 256x256 inputs cheap on CPU."""

    def __init__(self, out_dim: int = 64):
        super().__init__()
        self.out_dim = out_dim
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=8, stride=8), nn.BatchNorm2d(16), nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
            nn.Conv2d(32, out_dim, kernel_size=3, stride=2, padding=1), nn.BatchNorm2d(out_dim), nn.ReLU(),
        )
        # variance-preserving init: an untrained frozen copy still yields well-scaled features
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))


def _resnet50(weights_path: Path) -> nn.Module:
    import torchvision

    net = torchvision.models.resnet50(weights=None)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    net.load_state_dict(state)
    net.fc = nn.Identity()
    return net


class ImageEncoder(nn.Module):
    """Backbone wrapper producing one D_I-dimensional vector per image.

    ``mode="frozen"`` keeps the backbone in eval mode permanently, so batch
    norm uses its stored statistics and outputs do not depend on batch
    composition.
    """

    def __init__(self, backbone: str = "tiny-cnn", out_dim: int = 64, mode: str = "frozen",
                 weights_path: Optional[str] = None, image_size: int = IMAGE_SIZE):
        super().__init__()
        if mode not in ("frozen", "tuned"):
            raise ValueError(f"unknown image encoder mode {mode!r}")
        self.mode = mode
        self.image_size = image_size
        if backbone == "pretrained-cnn":
            if weights_path and Path(weights_path).exists():
                self.net = _resnet50(Path(weights_path))
                out_dim = 2048
            else:
                if weights_path not in _warned_paths:
                    _warned_paths.add(weights_path)
                    logger.warning("pretrained backbone weights %r not found; using tiny-cnn", weights_path)
                backbone = "tiny-cnn"
        if backbone == "tiny-cnn":
            self.net = TinyCNN(out_dim)
        elif backbone != "pretrained-cnn":
            raise ValueError(f"unknown image backbone {backbone!r}")
        self.backbone = backbone
        self.out_dim = out_dim
        if mode == "frozen":
            for p in self.net.parameters():
                p.requires_grad_(False)
            self.net.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.mode == "frozen":
            self.net.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def encode(self, images: Sequence[np.ndarray], batch_size: int = 64) -> torch.Tensor:
        parts = []
        for s in range(0, len(images), batch_size):
            parts.append(self(preprocess_images(images[s:s + batch_size], self.image_size)))
        return torch.cat(parts) if parts else torch.zeros(0, self.out_dim)


def image_embed(enc: ImageEncoder, images, ids: Optional[Sequence[str]] = None,
                batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings, (n, D_I). ``images`` holds arrays or ImageRefs."""
    arrays = []
    for i, img in enumerate(images):
        if hasattr(img, "load"):
            try:
                img = img.load()
            except (OSError, ValueError) as exc:
                sid = ids[i] if ids is not None else str(i)
                raise ValueError(f"sample {sid}: {exc}") from exc
        arrays.append(img)
    was_training = enc.training
    enc.eval()
    try:
        with torch.no_grad():
            return enc.encode(arrays, batch_size).numpy()
    finally:
        enc.train(was_training)


class MissingCellError(ValueError):
    pass


class MLPTabularEncoder(nn.Module):
    """Two hidden layers; categorical codes go through width-8 embedding tables."""

    def __init__(self, n_features: int, cardinalities: Optional[Dict[int, int]] = None,
                 hidden: Sequence[int] = (256, 256), out_dim: int = EMBED_DIM,
                 cat_width: int = 8, zero_init_output: bool = False):
        super().__init__()
        self.cardinalities = dict(cardinalities or {})
        self.cat_cols = sorted(self.cardinalities)
        self.num_cols = [j for j in range(n_features) if j not in self.cardinalities]
        self.embeddings = nn.ModuleList(nn.Embedding(self.cardinalities[j], cat_width)
                                        for j in self.cat_cols)
        width = len(self.num_cols) + cat_width * len(self.cat_cols)
        layers = []
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(width, out_dim)
        self.out_dim = out_dim
        if zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        if torch.isnan(rows).any():
            raise MissingCellError("MLP tabular encoder received missing cells; impute upstream")
        parts = [rows[:, self.num_cols]] if self.num_cols else []
        for j, emb in zip(self.cat_cols, self.embeddings):
            codes = rows[:, j].round().long().clamp(0, self.cardinalities[j] - 1)
            parts.append(emb(codes))
        return self.out(self.body(torch.cat(parts, dim=1)))


def mlp_embed(enc: MLPTabularEncoder, values, missing=None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if missing is not None and np.asarray(missing).any():
        raise MissingCellError("MLP tabular encoder received missing cells; impute upstream")
    with torch.no_grad():
        return enc(torch.from_numpy(values)).numpy()
