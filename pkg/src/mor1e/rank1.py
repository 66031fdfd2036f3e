"""Rank-1 expert mixture on top of a frozen linear map.

For a token ``x`` (length n) and frozen ``W`` (m x n) the layer computes

    z = W x + U G V^T x

where column i of ``U`` (m x N) and ``V`` (n x N) form expert ``u_i v_i^T``
and ``G`` holds the routing weights.  In diagonal routing ``G = diag(r)``
with ``r = softmax(A x + b) + I`` (I the optional per-instance reference
vector).  In full ("mix-and-match") routing a separate head emits N*N logits
softmaxed jointly, and ``G[i, j]`` weighs the pair ``u_i v_j^T``.

Evaluation is always ``t = V^T x``, ``s = G t``, ``z = W x + U s``; the
m x n update is never materialised except in ``forward_naive``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numeric import softmax, softmax_backward

FUSION_NONE = "none"
FUSION_TASKCAT = "taskcat"
FUSION_INTUITION = "intuition"
FUSION_MODES = (FUSION_NONE, FUSION_TASKCAT, FUSION_INTUITION)

DIAGONAL = "diag"
FULL = "full"
ROUTING_MODES = (DIAGONAL, FULL)


@dataclass
class Router:
    a: np.ndarray
    b: np.ndarray
    mode: str = DIAGONAL

    def __post_init__(self):
        if self.mode not in ROUTING_MODES:
            raise ValueError(f"routing mode must be one of {ROUTING_MODES}, got {self.mode!r}")
        if self.a.ndim != 2 or self.b.shape != (self.a.shape[0],):
            raise ValueError(f"router shapes disagree: a {self.a.shape}, b {self.b.shape}")

    @property
    def num_experts(self) -> int:
        rows = self.a.shape[0]
        if self.mode == DIAGONAL:
            return rows
        n = int(round(np.sqrt(rows)))
        if n * n != rows:
            raise ValueError(f"full-routing head must have N*N rows, got {rows}")
        return n


def gate(router: Router, x) -> np.ndarray:
    """Softmax gate for one token (shape (n,)) or a batch (T, n).

    Returns shape (..., N) in diagonal mode and (..., N, N) in full mode.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != router.a.shape[1]:
        raise ValueError(f"dimension mismatch: router expects n={router.a.shape[1]}, got {x.shape[-1]}")
    logits = x @ router.a.T + router.b
    p = softmax(logits, axis=-1)
    if router.mode == FULL:
        n = router.num_experts
        p = p.reshape(p.shape[:-1] + (n, n))
    return p


def category_encoding(category: int, n: int) -> np.ndarray:
    """|sin(j * c)| for j = 1..n: the task-category reference vector."""
    return np.abs(np.sin(np.arange(1, n + 1) * float(category)))


def _reference_term(ref: np.ndarray, full: bool) -> np.ndarray:
    if not full:
        return ref
    k = ref.shape[-1]
    return ref[..., :, None] * ref[..., None, :] / k


def fuse(g: np.ndarray, ref, mode: str, routing: str = DIAGONAL, renormalize: bool = False) -> np.ndarray:
    """Add the reference vector to the gate values (no renormalisation by default)."""
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    if mode == FUSION_NONE:
        return g
    ref = np.asarray(ref, dtype=np.float64)
    n = g.shape[-1]
    if ref.shape[-1] != n:
        raise ValueError(f"reference vector has length {ref.shape[-1]} but there are {n} experts")
    full = routing == FULL
    if full:
        out = g + _reference_term(ref, True)
    else:
        out = g + ref
    if renormalize:
        axes = (-2, -1) if full else (-1,)
        out = out / out.sum(axis=axes, keepdims=True)
    return out


def expert_apply(u, v, x) -> np.ndarray:
    """u (v . x), without forming u v^T."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError(f"dimension mismatch: v has dim {v.shape[0]}, x has dim {x.shape[0]}")
    return np.dot(v, x) * u


def topk_mask(g, k: int) -> np.ndarray:
    """Keep the k largest gate values (lowest index wins ties) and renormalise."""
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    order = np.argsort(-g, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(g, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    kept = np.where(mask, g, 0.0)
    return kept / kept.sum(axis=-1, keepdims=True)


class Rank1MoeLayer:
    def __init__(self, w, u_bank, v_bank, router: Router, fusion_mode: str = FUSION_NONE,
                 renormalize_fused: bool = False):
        self.w = np.asarray(w, dtype=np.float64)
        self.u_bank = np.asarray(u_bank, dtype=np.float64)
        self.v_bank = np.asarray(v_bank, dtype=np.float64)
        self.router = router
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {fusion_mode!r}")
        self.fusion_mode = fusion_mode
        self.renormalize_fused = renormalize_fused
        m, n = self.w.shape
        N = self.u_bank.shape[1]
        if self.u_bank.shape != (m, N) or self.v_bank.shape != (n, N):
            raise ValueError(
                f"expert banks must be U ({m}x{N}) and V ({n}x{N}), got {self.u_bank.shape} and {self.v_bank.shape}"
            )
        if router.a.shape[1] != n or router.num_experts != N:
            raise ValueError(f"router shape {router.a.shape} does not match n={n}, N={N}")

    @classmethod
    def init(cls, w, num_experts: int, rng: np.random.Generator, fusion_mode: str = FUSION_NONE,
             routing_mode: str = DIAGONAL, renormalize_fused: bool = False):
        """Zero U, uniform(+-1/sqrt(n)) V and router weight, zero router bias."""
        w = np.asarray(w, dtype=np.float64)
        m, n = w.shape
        bound = 1.0 / np.sqrt(n)
        rows = num_experts if routing_mode == DIAGONAL else num_experts**2
        v = rng.uniform(-bound, bound, size=(n, num_experts))
        a = rng.uniform(-bound, bound, size=(rows, n))
        router = Router(a, np.zeros(rows), routing_mode)
        return cls(w, np.zeros((m, num_experts)), v, router, fusion_mode, renormalize_fused)

    @property
    def shape(self):
        return self.w.shape

    @property
    def num_experts(self) -> int:
        return self.u_bank.shape[1]

    @property
    def routing_mode(self) -> str:
        return self.router.mode

    @property
    def needs_reference(self) -> bool:
        return self.fusion_mode != FUSION_NONE

    def params(self) -> dict:
        return {"u_bank": self.u_bank, "v_bank": self.v_bank, "a": self.router.a, "b": self.router.b}

    def num_trainable(self) -> int:
        return sum(p.size for p in self.params().values())

    def _check(self, x, ref):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w.shape[1]:
            raise ValueError(f"dimension mismatch: layer expects n={self.w.shape[1]}, got {x.shape[-1]}")
        if self.needs_reference and ref is None:
            raise ValueError(f"fusion mode {self.fusion_mode!r} requires a reference (intuition) vector")
        if not self.needs_reference and ref is not None:
            raise ValueError("a reference vector was given but fusion mode is 'none'")
        if ref is not None:
            ref = np.asarray(ref, dtype=np.float64)
            if ref.shape[-1] != self.num_experts:
                raise ValueError(
                    f"reference vector length {ref.shape[-1]} != number of experts {self.num_experts}"
                )
        return x, ref

    def routing(self, x, ref=None) -> tuple[np.ndarray, np.ndarray]:
        """(pre-fusion gate, fused routing values)."""
        p = gate(self.router, x)
        return p, fuse(p, ref, self.fusion_mode, self.routing_mode, self.renormalize_fused)

    def forward_cache(self, x, ref=None):
        x, ref = self._check(x, ref)
        p = gate(self.router, x)
        g = fuse(p, ref, self.fusion_mode, self.routing_mode)
        total = None
        if self.renormalize_fused and self.fusion_mode != FUSION_NONE:
            axes = (-2, -1) if self.routing_mode == FULL else (-1,)
            total = g.sum(axis=axes, keepdims=True)
            g = g / total
        t = x @ self.v_bank
        if self.routing_mode == DIAGONAL:
            s = g * t
        else:
            s = np.einsum("...ij,...j->...i", g, t)
        z = x @ self.w.T + s @ self.u_bank.T
        return z, (x, total, p, g, t, s)

    def backward(self, cache, dz):
        """Gradients of the trainables and of the input, given dL/dz.

        The reference vector is a constant; ``w`` gets no gradient.
        """
        x, total, p, g, t, s = cache
        dz = np.asarray(dz, dtype=np.float64)
        if dz.shape != x.shape[:-1] + (self.w.shape[0],):
            raise ValueError(f"upstream gradient has shape {dz.shape}, expected {x.shape[:-1] + (self.w.shape[0],)}")
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        t2 = t.reshape(-1, t.shape[-1])
        s2 = s.reshape(-1, s.shape[-1])
        N = self.num_experts
        full = self.routing_mode == FULL
        g2 = g.reshape((-1, N, N) if full else (-1, N))
        p2 = p.reshape(-1, N * N if full else N)

        d_u = dz2.T @ s2
        ds = dz2 @ self.u_bank
        if full:
            dg = ds[:, :, None] * t2[:, None, :]
            dt = np.einsum("rij,ri->rj", g2, ds)
        else:
            dg = ds * t2
            dt = ds * g2
        d_v = x2.T @ dt
        dx = dz2 @ self.w + dt @ self.v_bank.T

        dg = dg.reshape(dg.shape[0], -1)
        if total is not None:
            gf = g2.reshape(g2.shape[0], -1)
            dg = (dg - np.sum(dg * gf, axis=1, keepdims=True)) / total.reshape(-1, 1)
        dlogits = softmax_backward(p2, dg)
        d_a = dlogits.T @ x2
        d_b = dlogits.sum(axis=0)
        dx = dx + dlogits @ self.router.a
        grads = {"u_bank": d_u, "v_bank": d_v, "a": d_a, "b": d_b}
        return grads, dx.reshape(x.shape)

    def routing_entropy(self, cache) -> float:
        """Mean entropy (nats) of the pre-fusion routing distribution over u-experts."""
        p = cache[2]
        if self.routing_mode == FULL:
            p = p.sum(axis=-1)
        p = p.reshape(-1, self.num_experts)
        ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
        return float(np.clip(ent.mean(), 0.0, np.log(self.num_experts)))


def forward(layer: Rank1MoeLayer, x, intuition=None) -> np.ndarray:
    return layer.forward_cache(x, intuition)[0]


def adapter_delta(layer: Rank1MoeLayer, x, intuition=None) -> np.ndarray:
    """Inference-only U G V^T x for a (T, n) batch through the compiled kernel (diagonal mode)."""
    x, ref = layer._check(x, intuition)
    if layer.routing_mode != DIAGONAL:
        raise ValueError("adapter_delta supports diagonal routing only")
    x2 = np.ascontiguousarray(np.atleast_2d(x))
    _, g = layer.routing(x2, None if ref is None else np.broadcast_to(ref, (x2.shape[0], layer.num_experts)))
    out = kernels.rank1_adapter(x2, np.ascontiguousarray(layer.u_bank), np.ascontiguousarray(layer.v_bank),
                                np.ascontiguousarray(g))
    return out.reshape(x.shape[:-1] + (layer.w.shape[0],))


def forward_naive(layer: Rank1MoeLayer, x, intuition=None) -> np.ndarray:
    """Explicit per-expert sum of dense u_i v_j^T updates; an oracle for ``forward``."""
    x, ref = layer._check(x, intuition)
    if x.ndim != 1:
        return np.array([forward_naive(layer, xi, None if ref is None else (ref if ref.ndim == 1 else ref[i]))
                         for i, xi in enumerate(x)])
    _, g = layer.routing(x, ref)
    m, n = layer.w.shape
    z = np.array([sum(layer.w[r, c] * x[c] for c in range(n)) for r in range(m)])
    N = layer.num_experts
    for i in range(N):
        js = range(N) if layer.routing_mode == FULL else (i,)
        for j in js:
            weight = g[i, j] if layer.routing_mode == FULL else g[i]
            dense = np.outer(layer.u_bank[:, i], layer.v_bank[:, j])
            z = z + weight * (dense @ x)
    return z


def backward(layer: Rank1MoeLayer, x, intuition, upstream_grad):
    """Returns (grads dict with u_bank, v_bank, a, b; dL/dx)."""
    _, cache = layer.forward_cache(x, intuition)
    return layer.backward(cache, upstream_grad)


# ---------------------------------------------------------------------------
# checkpoint


def _write_block(fh, label, arr):
    arr = np.atleast_2d(arr)
    fh.write(f"{label} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join("%.17g" % v for v in row) + "\n")


def save_layer(layer: Rank1MoeLayer, path) -> None:
    m, n = layer.w.shape
    full = layer.routing_mode == FULL
    with open(path, "w") as fh:
        fh.write(f"{m} {n} {layer.num_experts} {layer.fusion_mode} {layer.routing_mode}\n")
        _write_block(fh, "W", layer.w)
        _write_block(fh, "U", layer.u_bank)
        _write_block(fh, "V", layer.v_bank)
        _write_block(fh, "A_full" if full else "A", layer.router.a)
        _write_block(fh, "b_full" if full else "b", layer.router.b[None, :])


def load_layer(path) -> Rank1MoeLayer:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) != 5:
        raise ValueError(f"{path}:1: header must be 'm n N fusion_mode routing_mode'")
    m, n, N = (int(v) for v in head[:3])
    fusion, routing = head[3], head[4]
    blocks = {}
    pos = 1
    while pos < len(lines):
        label_line = lines[pos].split()
        if len(label_line) != 3:
            raise ValueError(f"{path}:{pos + 1}: expected a block label 'NAME rows cols'")
        name, rows, cols = label_line[0], int(label_line[1]), int(label_line[2])
        body = lines[pos + 1 : pos + 1 + rows]
        if len(body) != rows:
            raise ValueError(f"{path}: block {name} truncated ({len(body)} of {rows} rows)")
        data = np.array([[float(v) for v in ln.split()] for ln in body])
        if data.shape != (rows, cols):
            raise ValueError(f"{path}: block {name} has shape {data.shape}, header says {(rows, cols)}")
        blocks[name] = data
        pos += 1 + rows
    suffix = "_full" if routing == FULL else ""
    try:
        router = Router(blocks["A" + suffix], blocks["b" + suffix][0], routing)
        layer = Rank1MoeLayer(blocks["W"], blocks["U"], blocks["V"], router, fusion)
    except KeyError as exc:
        raise ValueError(f"{path}: missing section {exc.args[0]}") from None
    if layer.w.shape != (m, n) or layer.num_experts != N:
        raise ValueError(f"{path}: sections disagree with header m={m} n={n} N={N}")
    return layer
