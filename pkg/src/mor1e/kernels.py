"""Kernel dispatch.

``assign_nearest`` (the k-means inner loop) comes from the compiled extension
when it is importable; set ``MOR1E_PURE_PYTHON=1`` to force the numpy
fallback.  ``cosine_matrix`` and ``rank1_adapter`` are matmul-shaped and
always use numpy, which beats a hand loop there (see benchmarks/).
"""
import os

from ._kernels_py import cosine_matrix, rank1_adapter

if os.environ.get("MOR1E_PURE_PYTHON") == "1":
    from ._kernels_py import assign_nearest

    BACKEND = "python"
else:
    try:
        from ._kernels import assign_nearest

        BACKEND = "compiled"
    except ImportError:
        from ._kernels_py import assign_nearest

        BACKEND = "python"

__all__ = ["assign_nearest", "cosine_matrix", "rank1_adapter", "BACKEND"]
