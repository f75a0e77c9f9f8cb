from .core import (ArchMismatchError, ContextSet, PFNDivergenceError, PFNWeights, load_weights,
                   pfn_embed, pfn_embed_context, pfn_predict, save_weights, train_pfn)
from .network import EMBED_DIM, PFNConfig
from .prior import PriorConfig, SyntheticTask, generate_synthetic_task

__all__ = [
    "ArchMismatchError", "ContextSet", "EMBED_DIM", "PFNConfig", "PFNDivergenceError",
    "PFNWeights", "PriorConfig", "SyntheticTask", "generate_synthetic_task", "load_weights",
    "pfn_embed", "pfn_embed_context", "pfn_predict", "save_weights", "train_pfn",
]
