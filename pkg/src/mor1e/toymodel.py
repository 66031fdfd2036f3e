"""A one-block attention classifier with adapters at Q, K, V and the FFN.

Everything except the adapters and the classifier head is frozen.  The
synthetic multitask generator plants per-task marker tokens (so instances of
a task cluster in embedding space) and a per-task linear labelling rule over
shared content tokens (so the right answer depends on knowing the task).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .baselines import LoraLayer, MoLoraLayer
from .numeric import derive_seed, make_rng, softmax, softmax_backward
from .rank1 import DIAGONAL, FUSION_MODES, FUSION_NONE, Rank1MoeLayer

SCHEMES = ("lora", "molora", "mor1e")
ADAPTER_SITES = ("q", "k", "v", "ffn_up", "ffn_down")
LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass
class ToyModelConfig:
    vocab_size: int = 48
    embed_dim: int = 16
    ffn_dim: int = 32
    seq_len: int = 12
    num_classes: int = 2
    scheme: str = "mor1e"
    experts: int = 4
    rank: int = 4
    fusion: str = FUSION_NONE
    routing: str = DIAGONAL
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "ffn_dim", "seq_len", "num_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.scheme != "mor1e" and self.fusion != FUSION_NONE:
            raise ValueError(f"fusion {self.fusion!r} is only defined for the mor1e scheme")
        if self.scheme == "lora" and self.rank < 1:
            raise ValueError("lora needs rank >= 1")
        if self.scheme in ("molora", "mor1e") and self.experts < 1:
            raise ValueError(f"{self.scheme} needs at least one expert")


@dataclass
class ToyBatch:
    tokens: np.ndarray  # (B, L) int
    labels: np.ndarray  # (B,)
    task_ids: np.ndarray  # (B,)
    reference: np.ndarray | None = None  # (B, N) routing reference per instance

    def __len__(self):
        return self.tokens.shape[0]

    def subset(self, idx) -> "ToyBatch":
        ref = None if self.reference is None else self.reference[idx]
        return ToyBatch(self.tokens[idx], self.labels[idx], self.task_ids[idx], ref)


# ---------------------------------------------------------------------------
# synthetic multitask data


@dataclass
class SyntheticTaskSpec:
    k_tasks: int = 4
    markers_per_task: int = 4
    content_vocab: int = 32
    seq_len: int = 12
    num_classes: int = 2
    separation: float = 0.5
    noise: float = 0.0

    def __post_init__(self):
        if self.k_tasks < 1 or self.markers_per_task < 1 or self.content_vocab < 1:
            raise ValueError("k_tasks, markers_per_task and content_vocab must be positive")
        if not 0.0 < self.separation < 1.0:
            raise ValueError(f"separation must lie in (0, 1), got {self.separation}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must lie in [0, 1], got {self.noise}")

    @property
    def vocab_size(self) -> int:
        return self.k_tasks * self.markers_per_task + self.content_vocab


def task_distribution(spec: SyntheticTaskSpec, task: int) -> np.ndarray:
    """Token probabilities for one task: marker block mass + uniform content mass."""
    p = np.zeros(spec.vocab_size)
    lo = task * spec.markers_per_task
    p[lo : lo + spec.markers_per_task] = spec.separation / spec.markers_per_task
    p[spec.k_tasks * spec.markers_per_task :] = (1.0 - spec.separation) / spec.content_vocab
    return p


@dataclass
class ToyDataset:
    spec: SyntheticTaskSpec
    seed: int
    tokens: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray

    def __len__(self):
        return self.tokens.shape[0]

    def texts(self) -> list[str]:
        return [tokens_to_text(t) for t in self.tokens]

    def batch(self, idx=None, reference=None) -> ToyBatch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        ref = None if reference is None else reference[idx]
        return ToyBatch(self.tokens[idx], self.labels[idx], self.task_ids[idx], ref)


def tokens_to_text(tokens) -> str:
    return " ".join(f"w{int(t)}" for t in tokens)


def generate_multitask_data(spec: SyntheticTaskSpec, count: int, rng: np.random.Generator, seed: int = 0) -> ToyDataset:
    """Round-robin instances over tasks; labels are argmax of a per-task linear rule on content counts."""
    if count < spec.k_tasks:
        raise ValueError(f"count ({count}) must be at least k_tasks ({spec.k_tasks})")
    n_markers = spec.k_tasks * spec.markers_per_task
    rules = rng.standard_normal((spec.k_tasks, spec.content_vocab, spec.num_classes))
    task_ids = np.arange(count) % spec.k_tasks
    tokens = np.empty((count, spec.seq_len), dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    for i, task in enumerate(task_ids):
        tokens[i] = rng.choice(spec.vocab_size, size=spec.seq_len, p=task_distribution(spec, task))
        content = tokens[i][tokens[i] >= n_markers] - n_markers
        counts = np.bincount(content, minlength=spec.content_vocab).astype(np.float64)
        labels[i] = int(np.argmax(counts @ rules[task]))
        if spec.noise > 0 and rng.random() < spec.noise:
            labels[i] = (labels[i] + 1 + rng.integers(spec.num_classes - 1)) % spec.num_classes if spec.num_classes > 1 else 0
    return ToyDataset(spec, seed, tokens, labels, task_ids)


def save_dataset(ds: ToyDataset, path) -> None:
    with open(path, "w") as fh:
        head = " ".join(f"{k}={v!r}" for k, v in asdict(ds.spec).items())
        fh.write(f"# toy-multitask {head} seed={ds.seed} count={len(ds)}\n")
        for t, lab, tok in zip(ds.task_ids, ds.labels, ds.tokens):
            fh.write(f"{t} {lab} " + " ".join(str(int(x)) for x in tok) + "\n")


def load_dataset(path) -> ToyDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# toy-multitask"):
        raise ValueError(f"{path}: missing '# toy-multitask' header")
    kv = dict(item.split("=", 1) for item in lines[0].split()[2:])
    types = {f.name: f.type for f in fields(SyntheticTaskSpec)}
    spec_args = {}
    for name in types:
        if name not in kv:
            raise ValueError(f"{path}: header is missing field {name}")
        spec_args[name] = float(kv[name]) if name in ("separation", "noise") else int(kv[name])
    spec = SyntheticTaskSpec(**spec_args)
    count = int(kv["count"])
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise ValueError(f"{path}: header says count={count} but found {len(rows)} records")
    for lineno, r in enumerate(rows, start=2):
        if len(r) != 2 + spec.seq_len:
            raise ValueError(f"{path}:{lineno}: expected {2 + spec.seq_len} fields, found {len(r)}")
    arr = np.array(rows, dtype=np.int64).reshape(count, 2 + spec.seq_len)
    return ToyDataset(spec, int(kv["seed"]), arr[:, 2:].copy(), arr[:, 1].copy(), arr[:, 0].copy())


# ---------------------------------------------------------------------------
# model


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layernorm_backward(y, inv, dy):
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), th


def _gelu_grad(x, th):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner


class ToyModel:
    def __init__(self, config: ToyModelConfig):
        self.config = c = config
        rng = make_rng(derive_seed(c.seed, "toy-model/base"))
        n, f = c.embed_dim, c.ffn_dim
        self.tok_emb = rng.standard_normal((c.vocab_size, n))
        self.pos_emb = 0.1 * rng.standard_normal((c.seq_len, n))
        base = {
            "q": rng.standard_normal((n, n)) / np.sqrt(n),
            "k": rng.standard_normal((n, n)) / np.sqrt(n),
            "v": rng.standard_normal((n, n)) / np.sqrt(n),
            "ffn_up": rng.standard_normal((f, n)) / np.sqrt(n),
            "ffn_down": rng.standard_normal((n, f)) / np.sqrt(f),
        }
        self.w_o = rng.standard_normal((n, n)) / np.sqrt(n)
        arng = make_rng(derive_seed(c.seed, "toy-model/adapters"))
        self.adapters = {site: self._make_adapter(w, arng) for site, w in base.items()}
        hrng = make_rng(derive_seed(c.seed, "toy-model/head"))
        bound = 1.0 / np.sqrt(n)
        self.head_w = hrng.uniform(-bound, bound, size=(c.num_classes, n))
        self.head_b = np.zeros(c.num_classes)

    def _make_adapter(self, w, rng):
        c = self.config
        if c.scheme == "lora":
            return LoraLayer.init(w, c.rank, rng)
        if c.scheme == "molora":
            return MoLoraLayer.init(w, c.experts, c.rank, rng, top_k=c.top_k)
        return Rank1MoeLayer.init(w, c.experts, rng, fusion_mode=c.fusion, routing_mode=c.routing)

    @property
    def needs_reference(self) -> bool:
        return self.config.scheme == "mor1e" and self.config.fusion != FUSION_NONE

    def params(self) -> dict:
        out = {}
        for site, layer in self.adapters.items():
            for name, arr in layer.params().items():
                out[f"{site}.{name}"] = arr
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def frozen(self) -> dict:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb, "w_o": self.w_o}
        for site, layer in self.adapters.items():
            out[f"{site}.w"] = layer.w
        return out

    def num_trainable(self) -> int:
        return sum(p.size for p in self.params().values())

    # -- forward / backward -------------------------------------------------

    def _linear(self, site, x, ref, use_adapters, caches):
        layer = self.adapters[site]
        if not use_adapters:
            return x @ layer.w.T
        z, cache = layer.forward_cache(x, ref if layer.needs_reference else None)
        caches[site] = cache
        return z

    def forward(self, batch: ToyBatch, use_adapters: bool = True, return_cache: bool = False):
        c = self.config
        tokens = np.asarray(batch.tokens)
        if tokens.ndim != 2 or tokens.shape[1] != c.seq_len:
            raise ValueError(f"tokens must have shape (B, {c.seq_len}), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise ValueError("token index out of range for the vocabulary")
        B, L, n = tokens.shape[0], c.seq_len, c.embed_dim
        ref = None
        if use_adapters and self.needs_reference:
            if batch.reference is None:
                raise ValueError(f"fusion mode {c.fusion!r} needs a per-instance reference vector")
            r = np.asarray(batch.reference, dtype=np.float64)
            if r.shape != (B, c.experts):
                raise ValueError(f"reference must have shape ({B}, {c.experts}), got {r.shape}")
            ref = np.repeat(r, L, axis=0)  # broadcast to every token of the instance
        caches: dict = {}

        x0 = self.tok_emb[tokens] + self.pos_emb
        h1, inv1 = _layernorm(x0)
        h1f = h1.reshape(B * L, n)
        q = self._linear("q", h1f, ref, use_adapters, caches).reshape(B, L, n)
        k = self._linear("k", h1f, ref, use_adapters, caches).reshape(B, L, n)
        v = self._linear("v", h1f, ref, use_adapters, caches).reshape(B, L, n)
        scores = np.einsum("bid,bjd->bij", q, k) / np.sqrt(n)
        att = softmax(scores, axis=-1)
        o = np.einsum("bij,bjd->bid", att, v)
        x1 = x0 + o @ self.w_o.T
        h2, inv2 = _layernorm(x1)
        u = self._linear("ffn_up", h2.reshape(B * L, n), ref, use_adapters, caches)
        act, th = _gelu(u)
        d = self._linear("ffn_down", act, ref, use_adapters, caches).reshape(B, L, n)
        x2 = x1 + d
        pooled = x2.mean(axis=1)
        logits = pooled @ self.head_w.T + self.head_b
        if not return_cache:
            return logits
        cache = dict(h1=h1, inv1=inv1, q=q, k=k, v=v, att=att, h2=h2, inv2=inv2, u=u, th=th,
                     pooled=pooled, adapters=caches)
        return logits, cache

    def backward(self, batch: ToyBatch, labels=None):
        """Mean cross-entropy and its gradients for every trainable parameter."""
        labels = batch.labels if labels is None else np.asarray(labels)
        logits, cache = self.forward(batch, return_cache=True)
        c = self.config
        B, L, n = logits.shape[0], c.seq_len, c.embed_dim
        probs = softmax(logits, axis=-1)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        loss = float(np.mean(logz - shifted[np.arange(B), labels]))

        dlogits = probs.copy()
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B
        grads = {"head.w": dlogits.T @ cache["pooled"], "head.b": dlogits.sum(axis=0)}
        dx2 = np.broadcast_to((dlogits @ self.head_w)[:, None, :] / L, (B, L, n))

        ad = cache["adapters"]
        g, dact = self.adapters["ffn_down"].backward(ad["ffn_down"], dx2.reshape(B * L, n))
        grads.update({f"ffn_down.{k}": v for k, v in g.items()})
        du = dact * _gelu_grad(cache["u"], cache["th"])
        g, dh2 = self.adapters["ffn_up"].backward(ad["ffn_up"], du)
        grads.update({f"ffn_up.{k}": v for k, v in g.items()})
        dx1 = dx2 + _layernorm_backward(cache["h2"], cache["inv2"], dh2.reshape(B, L, n))

        do = dx1 @ self.w_o
        att, q, k, v = cache["att"], cache["q"], cache["k"], cache["v"]
        datt = np.einsum("bid,bjd->bij", do, v)
        dv = np.einsum("bij,bid->bjd", att, do)
        dscores = softmax_backward(att, datt) / np.sqrt(n)
        dq = np.einsum("bij,bjd->bid", dscores, k)
        dk = np.einsum("bij,bid->bjd", dscores, q)
        # embeddings are frozen, so the gradient stops at the Q/K/V inputs
        for site, dsite in (("q", dq), ("k", dk), ("v", dv)):
            g, _ = self.adapters[site].backward(ad[site], dsite.reshape(B * L, n))
            grads.update({f"{site}.{k2}": v2 for k2, v2 in g.items()})
        return loss, grads

    def routing_entropies(self, batch: ToyBatch) -> dict:
        if self.config.scheme == "lora":
            return {}
        _, cache = self.forward(batch, return_cache=True)
        return {site: layer.routing_entropy(cache["adapters"][site]) for site, layer in self.adapters.items()}

    def layer_outputs_finite(self, batch: ToyBatch) -> str | None:
        """Name of the first adapter site producing non-finite values, if any."""
        with np.errstate(all="ignore"):
            _, cache = self.forward(batch, return_cache=True)
        for site in ADAPTER_SITES:
            for arr in cache["adapters"][site]:
                if isinstance(arr, np.ndarray) and not np.all(np.isfinite(arr)):
                    return site
        return None


def model_forward(model: ToyModel, batch: ToyBatch) -> np.ndarray:
    return model.forward(batch)


def model_backward(model: ToyModel, batch: ToyBatch, labels=None):
    return model.backward(batch, labels)


def oracle_reference(task_ids, n: int) -> np.ndarray:
    """One-hot task similarity (the oracle intuition source)."""
    task_ids = np.asarray(task_ids)
    if task_ids.max(initial=0) >= n:
        raise ValueError(f"task id {task_ids.max()} does not fit {n} experts")
    out = np.zeros((task_ids.size, n))
    out[np.arange(task_ids.size), task_ids] = 1.0
    return out
