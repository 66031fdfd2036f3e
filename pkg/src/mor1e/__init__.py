"""Rank-1 mixture-of-experts adapters with intuition-aware routing."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .rank1 import Rank1MoeLayer, Router, forward, forward_naive, gate, fuse, topk_mask  # noqa: E402
from .intuition import CentroidSet, EmbedderSpec, compute_intuition, kmeans  # noqa: E402
from .baselines import LoraLayer, MoLoraLayer, count_flops, count_params  # noqa: E402

__all__ = [
    "BACKEND", "Rank1MoeLayer", "Router", "forward", "forward_naive", "gate", "fuse", "topk_mask",
    "CentroidSet", "EmbedderSpec", "compute_intuition", "kmeans",
    "LoraLayer", "MoLoraLayer", "count_flops", "count_params",
]
