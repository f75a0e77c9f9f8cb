"""Fusion strategies: concatenation, element-wise sum / max, and DAFT."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

STRATEGIES = ("cat", "sum", "max", "daft")


def _same_dim(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding dims differ: {a.shape[-1]} vs {b.shape[-1]}")


def fuse_cat(e_t: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
    if e_t.shape[-1] == 0 or e_i.shape[-1] == 0:
        raise ValueError("cannot concatenate an empty embedding")
    return torch.cat([e_t, e_i], dim=-1)


def fuse_sum(e_t: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
    _same_dim(e_t, e_i)
    return e_t + e_i


def fuse_max(e_t: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
    _same_dim(e_t, e_i)
    return torch.maximum(e_t, e_i)


class Projection(nn.Module):
    """Bias-free maps of both embeddings into a shared width k."""

    def __init__(self, d_tab: int, d_img: int, k: int):
        super().__init__()
        self.w_t = nn.Linear(d_tab, k, bias=False)
        self.w_i = nn.Linear(d_img, k, bias=False)

    def forward(self, e_t: torch.Tensor, e_i: torch.Tensor):
        if e_t.shape[-1] != self.w_t.in_features or e_i.shape[-1] != self.w_i.in_features:
            raise ValueError(f"projection expects ({self.w_t.in_features}, {self.w_i.in_features}) "
                             f"inputs, got ({e_t.shape[-1]}, {e_i.shape[-1]})")
        return self.w_t(e_t), self.w_i(e_i)


def project(p: Projection, e_t: torch.Tensor, e_i: torch.Tensor):
    return p(e_t, e_i)


class DAFT(nn.Module):
    """Affine modulation of the image embedding conditioned on both modalities.

    Z = (1 + alpha) * e_i + beta with (alpha, beta) from a bottleneck over
    [e_i; e_t]. The output layer starts at zero, so Z == e_i at init.
    """

    def __init__(self, k: int, reduction: int = 7):
        super().__init__()
        self.k = k
        hidden = math.ceil(2 * k / reduction)
        self.bottleneck = nn.Sequential(nn.Linear(2 * k, hidden), nn.ReLU(), nn.Linear(hidden, 2 * k))
        nn.init.zeros_(self.bottleneck[2].weight)
        nn.init.zeros_(self.bottleneck[2].bias)

    def forward(self, e_t: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
        _same_dim(e_t, e_i)
        if e_i.shape[-1] != self.k:
            raise ValueError(f"DAFT expects width {self.k}, got {e_i.shape[-1]}")
        alpha, beta = self.bottleneck(torch.cat([e_i, e_t], dim=-1)).split(self.k, dim=-1)
        return (1 + alpha) * e_i + beta


def fuse_daft(p: DAFT, e_t: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
    return p(e_t, e_i)


class Fusion(nn.Module):
    def __init__(self, strategy: str, d_tab: int, d_img: int, k: int = 192):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}; choose from {STRATEGIES}")
        self.strategy = strategy
        self.projection = Projection(d_tab, d_img, k) if strategy != "cat" else None
        self.daft = DAFT(k) if strategy == "daft" else None
        self.out_dim = d_tab + d_img if strategy == "cat" else k

    def forward(self, e_t: torch.Tensor, e_i: torch.Tensor) -> torch.Tensor:
        if self.strategy == "cat":
            return fuse_cat(e_t, e_i)
        e_t, e_i = self.projection(e_t, e_i)
        if self.strategy == "sum":
            return fuse_sum(e_t, e_i)
        if self.strategy == "max":
            return fuse_max(e_t, e_i)
        return self.daft(e_t, e_i)
