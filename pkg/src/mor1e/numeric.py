"""Dense float64 helpers shared by every other module.

Vectors are 1-D ``numpy.ndarray`` of dtype float64, matrices are 2-D.  The
functions here validate shapes and finiteness and give descriptive errors;
the arithmetic itself is plain numpy.
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

__all__ = [
    "as_vector",
    "as_matrix",
    "matvec",
    "outer",
    "softmax",
    "softmax_backward",
    "cosine_similarity",
    "finite_diff_gradient",
    "make_rng",
    "derive_seed",
]


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matvec(m, x) -> np.ndarray:
    m = as_matrix(m, "m")
    x = as_vector(x, "x")
    if m.shape[1] != x.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix has {m.shape[1]} columns but vector has dim {x.shape[0]}"
        )
    return m @ x


def outer(u, v) -> np.ndarray:
    return np.outer(as_vector(u, "u"), as_vector(v, "v"))


def softmax(z, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pull ``dL/dp`` back through ``p = softmax(z)``."""
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` may have any shape; the result has the same shape.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"f returned a non-finite value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the stream is platform independent."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for a named subsystem."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
