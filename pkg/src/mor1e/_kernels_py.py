"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def assign_nearest(points, centers):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if centers.shape[1] != points.shape[1]:
        raise ValueError(
            f"dimension mismatch: points have d={points.shape[1]}, centers d={centers.shape[1]}"
        )
    # Accumulate coordinate by coordinate so the sum order matches the compiled loop.
    acc = np.zeros((points.shape[0], centers.shape[0]))
    for t in range(points.shape[1]):
        diff = points[:, t, None] - centers[None, :, t]
        acc += diff * diff
    labels = np.argmin(acc, axis=1).astype(np.int64)
    return labels, acc[np.arange(points.shape[0]), labels]


def cosine_matrix(emb, centers):
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if centers.shape[1] != emb.shape[1]:
        raise ValueError(
            f"dimension mismatch: embeddings have d={emb.shape[1]}, centroids d={centers.shape[1]}"
        )
    ne = np.linalg.norm(emb, axis=1)
    nc = np.linalg.norm(centers, axis=1)
    denom = ne[:, None] * nc[None, :]
    dots = emb @ centers.T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def rank1_adapter(x, u_bank, v_bank, gates):
    x = np.asarray(x, dtype=np.float64)
    if v_bank.shape != (x.shape[1], u_bank.shape[1]) or gates.shape != (x.shape[0], u_bank.shape[1]):
        raise ValueError("shape mismatch between x, u_bank, v_bank and gates")
    return ((x @ v_bank) * gates) @ u_bank.T
