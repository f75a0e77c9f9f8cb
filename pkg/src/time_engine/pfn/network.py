"""Row-token transformer used as the in-context tabular encoder.

Each sample becomes one token: its cells are encoded as (value, present)
pairs, padded to ``d_max`` and mapped to the model width. Context tokens
additionally carry their label. Context tokens attend among themselves;
query tokens attend to the context and to themselves only, so a query's
output never depends on which other queries share its batch.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

EMBED_DIM = 192


@dataclass(frozen=True)
class PFNConfig:
    width: int = EMBED_DIM
    n_layers: int = 3
    n_heads: int = 4
    ff_width: int = 384
    d_max: int = 20
    c_max: int = 10
    clip: float = 10.0

    def __post_init__(self):
        if self.width != EMBED_DIM:
            raise ValueError(f"hidden width must be {EMBED_DIM}, got {self.width}")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")

    def arch_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class _Block(nn.Module):
    def __init__(self, cfg: PFNConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.width // cfg.n_heads
        self.norm1 = nn.LayerNorm(cfg.width)
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.out = nn.Linear(cfg.width, cfg.width)
        self.norm2 = nn.LayerNorm(cfg.width)
        self.ff = nn.Sequential(
            nn.Linear(cfg.width, cfg.ff_width), nn.GELU(), nn.Linear(cfg.ff_width, cfg.width)
        )

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        b, h, n, e = t.shape
        return t.transpose(1, 2).reshape(b, n, h * e)

    def context_kv(self, h_ctx: torch.Tensor):
        q, k, v = self.qkv(self.norm1(h_ctx)).chunk(3, dim=-1)
        return self._heads(q), self._heads(k), self._heads(v)

    def forward_context(self, h_ctx: torch.Tensor, kv=None):
        q, k, v = kv if kv is not None else self.context_kv(h_ctx)
        a = F.scaled_dot_product_attention(q, k, v)
        h_ctx = h_ctx + self.out(self._merge(a))
        return h_ctx + self.ff(self.norm2(h_ctx))

    def forward_query(self, h_q: torch.Tensor, k_ctx: torch.Tensor, v_ctx: torch.Tensor):
        q, k, v = (self._heads(t) for t in self.qkv(self.norm1(h_q)).chunk(3, dim=-1))
        scale = 1.0 / math.sqrt(self.head_dim)
        s_ctx = torch.matmul(q, k_ctx.transpose(-1, -2)) * scale  # (b, h, nq, nc)
        s_self = (q * k).sum(-1, keepdim=True) * scale  # (b, h, nq, 1)
        p = torch.softmax(torch.cat([s_ctx, s_self], dim=-1), dim=-1)
        a = torch.matmul(p[..., :-1], v_ctx) + p[..., -1:] * v
        h_q = h_q + self.out(self._merge(a))
        return h_q + self.ff(self.norm2(h_q))


class InContextTransformer(nn.Module):
    def __init__(self, cfg: PFNConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.cell_encoder = nn.Sequential(nn.Linear(2 * cfg.d_max, w), nn.GELU(), nn.Linear(w, w))
        self.class_embedding = nn.Embedding(cfg.c_max, w)
        self.target_encoder = nn.Linear(1, w)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(w)
        self.class_head = nn.Linear(w, cfg.c_max)
        self.reg_head = nn.Linear(w, 1)

    def encode_cells(self, x: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
        """x, missing: (b, n, d) with d <= d_max; x must already be standardized."""
        present = (~missing).to(x.dtype)
        # the mask is authoritative: whatever sits under it never reaches the network
        x = torch.where(missing, torch.zeros_like(x), x).clamp(-self.cfg.clip, self.cfg.clip)
        pad = self.cfg.d_max - x.shape[-1]
        cells = torch.stack([F.pad(x, (0, pad)), F.pad(present, (0, pad))], dim=-1)
        return self.cell_encoder(cells.flatten(-2))

    def encode_labels(self, y: torch.Tensor, kind: str) -> torch.Tensor:
        if kind == "classification":
            return self.class_embedding(y.long())
        return self.target_encoder(y.unsqueeze(-1).to(self.norm.weight.dtype))

    def forward(self, x_ctx, m_ctx, y_ctx, x_q, m_q, kind: str = "classification",
                query_chunk: Optional[int] = None) -> torch.Tensor:
        """Return final normalized hidden states of the query tokens, (b, nq, width)."""
        h_ctx = self.encode_cells(x_ctx, m_ctx) + self.encode_labels(y_ctx, kind)
        cache: List[Tuple[torch.Tensor, torch.Tensor]] = []
        for block in self.blocks:
            kv = block.context_kv(h_ctx)
            cache.append((kv[1], kv[2]))
            h_ctx = block.forward_context(h_ctx, kv)

        h_q = self.encode_cells(x_q, m_q)
        chunk = query_chunk or h_q.shape[1] or 1
        outs = []
        for start in range(0, h_q.shape[1], chunk):
            h = h_q[:, start:start + chunk]
            for block, (k, v) in zip(self.blocks, cache):
                h = block.forward_query(h, k, v)
            outs.append(self.norm(h))
        return torch.cat(outs, dim=1) if outs else self.norm(h_q)

    def class_logits(self, hidden: torch.Tensor, n_classes: int) -> torch.Tensor:
        return self.class_head(hidden)[..., :n_classes]

    def regression_mean(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.reg_head(hidden).squeeze(-1)
