"""LoRA and MoLoRA reference adapters, and analytic parameter/FLOP accounting."""
from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .numeric import softmax_backward
from .rank1 import DIAGONAL, FULL, FUSION_NONE, Router, gate, topk_mask


class LoraLayer:
    """z = W x + (alpha / r) A_up B_down x, with W frozen."""

    needs_reference = False

    def __init__(self, w, b_down, a_up, alpha: float | None = None):
        self.w = np.asarray(w, dtype=np.float64)
        self.b_down = np.asarray(b_down, dtype=np.float64)
        self.a_up = np.asarray(a_up, dtype=np.float64)
        m, n = self.w.shape
        r = self.b_down.shape[0]
        if r < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.b_down.shape != (r, n) or self.a_up.shape != (m, r):
            raise ValueError(
                f"LoRA factors must be B_down ({r}x{n}) and A_up ({m}x{r}), got {self.b_down.shape}, {self.a_up.shape}"
            )
        self.alpha = float(r if alpha is None else alpha)

    @classmethod
    def init(cls, w, rank: int, rng: np.random.Generator, alpha: float | None = None):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        w = np.asarray(w, dtype=np.float64)
        m, n = w.shape
        bound = 1.0 / np.sqrt(n)
        return cls(w, rng.uniform(-bound, bound, size=(rank, n)), np.zeros((m, rank)), alpha)

    @property
    def rank(self) -> int:
        return self.b_down.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def params(self) -> dict:
        return {"b_down": self.b_down, "a_up": self.a_up}

    def num_trainable(self) -> int:
        return self.b_down.size + self.a_up.size

    def forward_cache(self, x, ref=None):
        if ref is not None:
            raise ValueError("LoRA takes no reference vector")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w.shape[1]:
            raise ValueError(f"dimension mismatch: layer expects n={self.w.shape[1]}, got {x.shape[-1]}")
        h = x @ self.b_down.T
        z = x @ self.w.T + self.scale * (h @ self.a_up.T)
        return z, (x, h)

    def backward(self, cache, dz):
        x, h = cache
        dz = np.asarray(dz, dtype=np.float64)
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, self.w.shape[0])
        h2 = h.reshape(-1, self.rank)
        d_a = self.scale * dz2.T @ h2
        dh = self.scale * dz2 @ self.a_up
        d_b = dh.T @ x2
        dx = dz2 @ self.w + dh @ self.b_down
        return {"b_down": d_b, "a_up": d_a}, dx.reshape(x.shape)


def lora_forward(layer: LoraLayer, x) -> np.ndarray:
    return layer.forward_cache(x)[0]


class MoLoraLayer:
    """Softmax-routed mixture of N rank-r LoRA experts, optionally top-k masked."""

    needs_reference = False

    def __init__(self, w, b_down, a_up, router: Router, alpha: float | None = None, top_k: int | None = None):
        self.w = np.asarray(w, dtype=np.float64)
        self.b_down = np.asarray(b_down, dtype=np.float64)  # (N, r, n)
        self.a_up = np.asarray(a_up, dtype=np.float64)  # (N, m, r)
        m, n = self.w.shape
        N, r = self.b_down.shape[:2]
        if self.b_down.shape != (N, r, n) or self.a_up.shape != (N, m, r):
            raise ValueError(f"expert factor shapes {self.b_down.shape}, {self.a_up.shape} do not match W {self.w.shape}")
        if router.mode != DIAGONAL or router.num_experts != N or router.a.shape[1] != n:
            raise ValueError("MoLoRA needs a diagonal router with one logit per expert")
        if top_k is not None and not 1 <= top_k <= N:
            raise ValueError(f"top_k must be in [1, {N}], got {top_k}")
        self.router = router
        self.top_k = top_k
        self.alpha = float(r if alpha is None else alpha)

    @classmethod
    def init(cls, w, num_experts: int, rank: int, rng: np.random.Generator, alpha: float | None = None,
             top_k: int | None = None):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        w = np.asarray(w, dtype=np.float64)
        m, n = w.shape
        bound = 1.0 / np.sqrt(n)
        b = rng.uniform(-bound, bound, size=(num_experts, rank, n))
        a = rng.uniform(-bound, bound, size=(num_experts, n))
        router = Router(a, np.zeros(num_experts))
        return cls(w, b, np.zeros((num_experts, m, rank)), router, alpha, top_k)

    @property
    def num_experts(self) -> int:
        return self.b_down.shape[0]

    @property
    def rank(self) -> int:
        return self.b_down.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def params(self) -> dict:
        return {"b_down": self.b_down, "a_up": self.a_up, "a": self.router.a, "b": self.router.b}

    def num_trainable(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward_cache(self, x, ref=None):
        if ref is not None:
            raise ValueError("MoLoRA takes no reference vector")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w.shape[1]:
            raise ValueError(f"dimension mismatch: layer expects n={self.w.shape[1]}, got {x.shape[-1]}")
        p = gate(self.router, x)
        g = topk_mask(p, self.top_k) if self.top_k is not None else p
        h = np.einsum("...n,irn->...ir", x, self.b_down)
        y = np.einsum("...ir,imr->...im", h, self.a_up)
        z = x @ self.w.T + self.scale * np.einsum("...i,...im->...m", g, y)
        return z, (x, p, g, h, y)

    def backward(self, cache, dz):
        x, p, g, h, y = cache
        N, r = self.num_experts, self.rank
        m, n = self.w.shape
        x2 = x.reshape(-1, n)
        dz2 = np.asarray(dz, dtype=np.float64).reshape(-1, m)
        p2, g2 = p.reshape(-1, N), g.reshape(-1, N)
        h2, y2 = h.reshape(-1, N, r), y.reshape(-1, N, m)
        s = self.scale
        d_a_up = s * np.einsum("ti,tm,tir->imr", g2, dz2, h2)
        dh = s * np.einsum("ti,tm,imr->tir", g2, dz2, self.a_up)
        d_b_down = np.einsum("tir,tn->irn", dh, x2)
        dx = dz2 @ self.w + np.einsum("tir,irn->tn", dh, self.b_down)
        dg = s * np.einsum("tm,tim->ti", dz2, y2)
        if self.top_k is not None:
            mask = g2 > 0
            kept = np.where(mask, p2, 0.0).sum(axis=1, keepdims=True)
            dp = np.where(mask, (dg - np.sum(dg * g2, axis=1, keepdims=True)) / kept, 0.0)
        else:
            dp = dg
        dlogits = softmax_backward(p2, dp)
        dx = dx + dlogits @ self.router.a
        grads = {"b_down": d_b_down, "a_up": d_a_up, "a": dlogits.T @ x2, "b": dlogits.sum(axis=0)}
        return grads, dx.reshape(x.shape)

    def routing_entropy(self, cache) -> float:
        g = cache[2].reshape(-1, self.num_experts)
        ent = -np.sum(np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0), axis=1)
        return float(np.clip(ent.mean(), 0.0, np.log(self.num_experts)))


def molora_forward(layer: MoLoraLayer, x) -> np.ndarray:
    return layer.forward_cache(x)[0]


# ---------------------------------------------------------------------------
# cost accounting

FLOP_CONVENTION = "1 multiply-add = 2 FLOPs; adapter forward path only; per token"


class ArchFileError(ValueError):
    pass


@dataclass(frozen=True)
class Target:
    name: str
    m: int
    n: int
    count: int


@dataclass(frozen=True)
class ArchSpec:
    name: str
    targets: tuple

    def __post_init__(self):
        for t in self.targets:
            if t.m <= 0 or t.n <= 0 or t.count <= 0:
                raise ValueError(f"target {t.name} has non-positive dimensions {(t.m, t.n, t.count)}")


@dataclass(frozen=True)
class Scheme:
    # labels avoid commas so report rows stay plain CSV
    kind: str  # "lora" | "molora" | "mor1e"
    rank: int = 1
    experts: int = 1
    routing: str = DIAGONAL
    fusion: str = FUSION_NONE

    def __post_init__(self):
        if self.kind not in ("lora", "molora", "mor1e"):
            raise ValueError(f"unknown adapter scheme {self.kind!r}")
        if self.kind in ("lora", "molora") and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.experts < 0:
            raise ValueError(f"expert count must be >= 0, got {self.experts}")
        if self.routing not in (DIAGONAL, FULL):
            raise ValueError(f"unknown routing mode {self.routing!r}")

    @property
    def label(self) -> str:
        if self.kind == "lora":
            return f"lora(r={self.rank})"
        if self.kind == "molora":
            return f"molora(N={self.experts};r={self.rank})"
        return f"mor1e(N={self.experts};{self.routing})"


@dataclass(frozen=True)
class CostReport:
    scheme: str
    trainable_params: int
    extra_flops_per_token: int
    percentage_of_base: float
    convention: str = FLOP_CONVENTION

    CSV_HEADER = "scheme,trainable_params,percentage,extra_flops_per_token"

    def csv_row(self) -> str:
        return f"{self.scheme},{self.trainable_params},{self.percentage_of_base:.4f},{self.extra_flops_per_token}"


def target_params(m: int, n: int, scheme: Scheme) -> int:
    N, r = scheme.experts, scheme.rank
    if scheme.kind == "lora":
        return r * (m + n)
    if scheme.kind == "molora":
        return N * r * (m + n) + n * N + N if N else 0
    if N == 0:
        return 0
    if scheme.routing == FULL:
        return N * (m + n) + n * N * N + N * N
    return N * (m + n) + n * N + N


def target_flops(m: int, n: int, scheme: Scheme) -> int:
    N, r = scheme.experts, scheme.rank
    if scheme.kind == "lora":
        return 2 * r * (m + n)
    if N == 0:
        return 0
    if scheme.kind == "molora":
        return 2 * N * r * (m + n) + 2 * n * N + N
    fused = scheme.fusion != FUSION_NONE
    if scheme.routing == FULL:
        # gate over N*N logits, dense G t, and (1/K) I I^T fusion
        return 2 * N * (m + n) + 2 * n * N * N + N * N + 2 * N * N + (N * N if fused else 0)
    return 2 * N * (m + n) + 2 * n * N + N + (N if fused else 0)


def count_params(arch: ArchSpec, scheme: Scheme, base_params: int | None = None) -> CostReport:
    params = sum(t.count * target_params(t.m, t.n, scheme) for t in arch.targets)
    flops = sum(t.count * target_flops(t.m, t.n, scheme) for t in arch.targets)
    pct = 100.0 * params / base_params if base_params else 0.0
    return CostReport(scheme.label, params, flops, pct)


def count_flops(arch: ArchSpec, scheme: Scheme, base_params: int | None = None) -> CostReport:
    # both numbers come from the same pass; kept as a separate entry point for symmetry
    return count_params(arch, scheme, base_params)


def parse_arch(text: str, name: str = "arch", source: str = "<string>") -> ArchSpec:
    targets = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ArchFileError(f"{source}:{lineno}: expected 'name m n count', got {raw.strip()!r}")
        try:
            m, n, count = (int(p) for p in parts[1:])
        except ValueError:
            raise ArchFileError(f"{source}:{lineno}: m, n and count must be integers") from None
        if m <= 0 or n <= 0 or count <= 0:
            raise ArchFileError(f"{source}:{lineno}: m, n and count must be positive")
        targets.append(Target(parts[0], m, n, count))
    if not targets:
        raise ArchFileError(f"{source}: no targets defined")
    return ArchSpec(name, tuple(targets))


SHIPPED_ARCHS = ("7b", "mistral7b", "2b", "1b")

# base-model parameter counts used for percentages
SHIPPED_BASE_PARAMS = {"7b": 6_738_415_616, "mistral7b": 7_241_732_096, "2b": 2_506_172_416, "1b": 1_100_048_384}


def load_arch(path_or_name: str) -> ArchSpec:
    """Load an arch file, or one of the shipped specs by name (see SHIPPED_ARCHS)."""
    if path_or_name in SHIPPED_ARCHS and not os.path.exists(path_or_name):
        text = resources.files("mor1e").joinpath(f"data/archs/{path_or_name}.txt").read_text()
        return parse_arch(text, path_or_name, f"{path_or_name}.txt")
    with open(path_or_name) as fh:
        text = fh.read()
    return parse_arch(text, os.path.basename(path_or_name), path_or_name)


# Reference comparison used for the shipped efficiency table: LoRA r=32,
# MoLoRA 8 experts x r=4 (same total rank), MoR1E with 20 rank-1 experts.
REFERENCE_SCHEMES = (
    Scheme("lora", rank=32),
    Scheme("molora", rank=4, experts=8),
    Scheme("mor1e", experts=20, fusion="intuition"),
)
