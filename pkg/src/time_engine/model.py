"""The assembled network: tabular branch + image branch + fusion + linear head."""
from __future__ import annotations

import hashlib
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .datamodel import CLASSIFICATION, MultimodalDataset
from .encoders import ImageEncoder, MLPTabularEncoder
from .fusion import Fusion
from .ingest import Normalizer
from .pfn import EMBED_DIM, ContextSet, PFNWeights, pfn_embed


class TIMEModel(nn.Module):
    """Either branch may be absent, which gives the single-modality baselines.

    The in-context encoder is held as a plain attribute, never registered as
    a submodule, so its weights cannot reach an optimizer through
    ``parameters()``.
    """

    def __init__(self, task: str, n_outputs: int, tabular: Optional[str] = "pfn",
                 image_encoder: Optional[ImageEncoder] = None, fusion: str = "cat", k: int = 192,
                 mlp: Optional[MLPTabularEncoder] = None, pfn: Optional[PFNWeights] = None,
                 normalizer: Optional[Normalizer] = None, strict_probe: bool = False):
        super().__init__()
        if tabular not in ("pfn", "mlp", None):
            raise ValueError(f"unknown tabular encoder {tabular!r}")
        if tabular is None and image_encoder is None:
            raise ValueError("model needs at least one branch")
        if tabular == "mlp" and mlp is None:
            raise ValueError("mlp tabular branch requires an MLPTabularEncoder")
        self.task = task
        self.tabular = tabular
        self.pfn = pfn
        self.normalizer = normalizer
        self.mlp = mlp if tabular == "mlp" else None
        self.image_encoder = image_encoder
        self.strict_probe = strict_probe
        d_tab = EMBED_DIM if tabular else 0
        d_img = image_encoder.out_dim if image_encoder is not None else 0
        if tabular and image_encoder is not None:
            self.fusion = Fusion(fusion, d_tab, d_img, k)
            self.fusion_name = fusion
            z_dim = self.fusion.out_dim
        else:
            self.fusion = None
            self.fusion_name = "none"
            z_dim = d_tab or d_img
        self.head = nn.Linear(z_dim, n_outputs)

    @property
    def mode(self) -> str:
        if self.image_encoder is None:
            return "frozen"
        return self.image_encoder.mode

    def tabular_embedding(self, tab: torch.Tensor) -> torch.Tensor:
        # pfn rows arrive as precomputed embeddings; mlp rows as normalized cells
        return self.mlp(tab) if self.tabular == "mlp" else tab

    def fused(self, tab: Optional[torch.Tensor], img: Optional[torch.Tensor],
              img_is_embedding: bool = True) -> torch.Tensor:
        e_t = self.tabular_embedding(tab) if self.tabular else None
        e_i = None
        if self.image_encoder is not None:
            e_i = img if img_is_embedding else self.image_encoder(img)
        if self.fusion is not None:
            return self.fusion(e_t, e_i)
        return e_t if e_t is not None else e_i

    def forward(self, tab: Optional[torch.Tensor], img: Optional[torch.Tensor],
                img_is_embedding: bool = True) -> torch.Tensor:
        """Raw head outputs: logits (n, C) or regression values (n,)."""
        out = self.head(self.fused(tab, img, img_is_embedding))
        return out if self.task == CLASSIFICATION else out.squeeze(-1)

    def predict(self, tab, img, img_is_embedding: bool = True) -> torch.Tensor:
        out = self(tab, img, img_is_embedding)
        return torch.softmax(out, dim=-1) if self.task == CLASSIFICATION else out


def trainable_parameters(m: TIMEModel) -> List[Tuple[str, nn.Parameter]]:
    """Parameters the optimizer may touch.

    The in-context encoder is never included. The image backbone is included
    only in tuned mode. Projections, DAFT and the MLP branch stay trainable
    under linear probing unless ``strict_probe`` restricts training to the
    head alone.
    """
    out = []
    for name, p in m.named_parameters():
        if m.strict_probe and not name.startswith("head."):
            continue
        if name.startswith("image_encoder.") and m.mode != "tuned":
            continue
        out.append((name, p))
    return out


def frozen_parameters(m: TIMEModel) -> List[Tuple[str, torch.Tensor]]:
    keep = {n for n, _ in trainable_parameters(m)}
    return [(n, p) for n, p in m.named_parameters() if n not in keep]


def tensor_hash(named: Iterable[Tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def forward(m: TIMEModel, batch: MultimodalDataset, ctx: Optional[ContextSet] = None) -> np.ndarray:
    """End-to-end eval-mode prediction for raw samples.

    ``batch`` carries raw (un-normalized) cells; ``ctx`` is the normalized
    training context and is required for the in-context branch.
    """
    if m.tabular is not None and m.normalizer is None:
        raise ValueError("model has no fitted normalizer")
    if m.normalizer is not None and [c.kind for c in batch.schema] != m.normalizer.kinds:
        raise ValueError("batch schema does not match the model")
    tab = None
    if m.tabular == "pfn":
        if ctx is None or m.pfn is None:
            raise ValueError("the in-context branch needs a context set and encoder weights")
        rows = m.normalizer.transform_arrays(batch.values, batch.missing)
        tab = torch.from_numpy(pfn_embed(m.pfn, ctx, rows, batch.missing))
    elif m.tabular == "mlp":
        rows = m.normalizer.transform_arrays(batch.values, batch.missing)
        tab = torch.from_numpy(rows.astype(np.float32))
    was_training = m.training
    m.eval()
    try:
        with torch.no_grad():
            img = None
            if m.image_encoder is not None:
                from .encoders import preprocess_images

                img = preprocess_images(batch.images(), m.image_encoder.image_size)
            return m.predict(tab, img, img_is_embedding=False).numpy()
    finally:
        m.train(was_training)
