"""Instance embeddings, k-means centroids and cosine "intuition" scores.

The pipeline is: sample training texts, embed them, cluster the embeddings
into ``k`` centroids, then score every instance by its clamped cosine
similarity to each centroid.  Two embedders are provided: a deterministic
synthetic one (no network, used by tests and the toy benchmark) and a client
for an HTTP embeddings service with an on-disk cache.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .numeric import cosine_similarity, make_rng

logger = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
EXTERNAL = "service"


class EmbeddingServiceError(RuntimeError):
    def __init__(self, message: str, batch_indices: Sequence[int] = ()):
        super().__init__(message)
        self.batch_indices = list(batch_indices)


class CentroidFileError(ValueError):
    pass


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source_id: str = ""


@dataclass
class EmbedderSpec:
    kind: str = SYNTHETIC
    dim: int = 16
    # synthetic embedder
    seed: int = 0
    archetypes: int = 4
    noise: float = 0.3
    # external service
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "EMBED_API_KEY"
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    batch_size: int = 64
    max_in_flight: int = 4
    cache_path: str | None = None

    def __post_init__(self):
        if self.kind not in (SYNTHETIC, EXTERNAL):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError(f"embedding dim must be positive, got {self.dim}")
        if self.kind == EXTERNAL and (not self.endpoint or not self.model):
            raise ValueError("service embedder requires a non-empty endpoint and model name")
        if self.kind == SYNTHETIC and not 1 <= self.archetypes <= self.dim:
            raise ValueError(
                f"synthetic embedder needs 1 <= archetypes <= dim, got {self.archetypes} and {self.dim}"
            )

    @property
    def fingerprint(self) -> str:
        if self.kind == SYNTHETIC:
            return f"synthetic:d={self.dim}:seed={self.seed}:a={self.archetypes}:noise={self.noise!r}"
        return f"service:{self.model}:d={self.dim}"


def _text_seed(seed: int, text: str) -> int:
    h = hashlib.sha256(f"{seed}\x00{text}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class SyntheticEmbedder:
    """Deterministic stand-in for a text embedding model.

    Texts starting with an archetype tag ``@k`` embed as the k-th archetype
    mean plus text-seeded Gaussian noise; the archetype means are orthonormal
    so cross-archetype cosine is close to 0 and within-archetype cosine is
    about ``1 / (1 + noise**2)``.  Any other text embeds as the mean of
    per-word random vectors, so texts drawn from the same vocabulary cluster.
    """

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        rng = make_rng(spec.seed)
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.archetypes)))
        self.means = q.T.copy()
        self._words: dict[str, np.ndarray] = {}

    def _noise(self, text: str) -> np.ndarray:
        rng = make_rng(_text_seed(self.spec.seed, text))
        return rng.standard_normal(self.spec.dim) / np.sqrt(self.spec.dim)

    def _word(self, word: str) -> np.ndarray:
        v = self._words.get(word)
        if v is None:
            v = self._noise("word\x00" + word)
            self._words[word] = v
        return v

    def embed_one(self, text: str) -> np.ndarray:
        words = text.split()
        if words and words[0].startswith("@") and words[0][1:].isdigit():
            k = int(words[0][1:])
            if k >= self.spec.archetypes:
                raise ValueError(f"archetype tag @{k} out of range (archetypes={self.spec.archetypes})")
            return self.means[k] + self.spec.noise * self._noise(text)
        if not words:
            return self._noise(text)
        return np.mean([self._word(w) for w in words], axis=0)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return np.array([self.embed_one(t) for t in texts])


class EmbeddingCache:
    """Append-only text file mapping hash(text, model) to a vector.

    Layout: a header ``<dim> <model>`` then one ``<hash> <d floats>`` record
    per line, floats written with 17 significant digits.
    """

    def __init__(self, path: str, dim: int, model: str):
        self.path = path
        self.dim = dim
        self.model = model
        self._lock = threading.Lock()
        self._store: dict[str, np.ndarray] = {}
        if os.path.exists(path) and os.path.getsize(path) > 0:
            self._load()
        else:
            with open(path, "w") as fh:
                fh.write(f"{dim} {model}\n")

    @staticmethod
    def key(text: str, model: str) -> str:
        return hashlib.sha256(f"{model}\x00{text}".encode()).hexdigest()

    def _load(self):
        with open(self.path) as fh:
            header = fh.readline().split(maxsplit=1)
            if len(header) != 2 or int(header[0]) != self.dim or header[1].strip() != self.model:
                raise ValueError(
                    f"cache {self.path} was written for {header!r}, expected dim={self.dim} model={self.model}"
                )
            for lineno, line in enumerate(fh, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != self.dim + 1:
                    # a torn trailing write; everything before it is still valid
                    logger.warning("skipping malformed cache record at %s:%d", self.path, lineno)
                    continue
                self._store[parts[0]] = np.array([float(p) for p in parts[1:]])

    def get(self, text: str) -> np.ndarray | None:
        return self._store.get(self.key(text, self.model))

    def put_many(self, items: Sequence[tuple[str, np.ndarray]]):
        with self._lock:
            with open(self.path, "a") as fh:
                for text, vec in items:
                    k = self.key(text, self.model)
                    if k in self._store:
                        continue
                    self._store[k] = np.array(vec, dtype=np.float64)
                    fh.write(k + " " + " ".join("%.17g" % x for x in vec) + "\n")

    def __len__(self):
        return len(self._store)


class ServiceEmbedder:
    """Client for an HTTP embeddings endpoint.

    Sends ``{"model": name, "input": [texts]}`` and accepts either the
    ``{"data": [{"embedding": [...], "index": i}]}`` shape or a bare
    ``{"embeddings": [[...]]}`` list.
    """

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec

    def _post(self, texts: list[str]) -> list[list[float]]:
        body = json.dumps({"model": self.spec.model, "input": texts}).encode()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.spec.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.spec.endpoint, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.spec.timeout) as resp:
            payload = json.loads(resp.read())
        if "data" in payload:
            rows = sorted(payload["data"], key=lambda r: r.get("index", 0))
            return [r["embedding"] for r in rows]
        return payload["embeddings"]

    def _batch(self, texts: list[str], indices: list[int]) -> np.ndarray:
        last = None
        for attempt in range(self.spec.retries + 1):
            try:
                vecs = self._post(texts)
                break
            except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
                last = exc
                if attempt < self.spec.retries:
                    time.sleep(self.spec.backoff * 2**attempt)
        else:
            raise EmbeddingServiceError(
                f"embedding request failed after {self.spec.retries + 1} attempts: {last}", indices
            )
        if len(vecs) != len(texts):
            raise EmbeddingServiceError(
                f"service returned {len(vecs)} embeddings for {len(texts)} inputs", indices
            )
        out = np.array(vecs, dtype=np.float64)
        if out.ndim != 2 or out.shape[1] != self.spec.dim:
            raise EmbeddingServiceError(
                f"service returned embeddings of shape {out.shape}, expected dim {self.spec.dim}", indices
            )
        return out

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        bs = self.spec.batch_size
        starts = range(0, len(texts), bs)
        jobs = [(texts[s : s + bs], list(range(s, min(s + bs, len(texts))))) for s in starts]
        with ThreadPoolExecutor(max_workers=max(1, self.spec.max_in_flight)) as pool:
            parts = list(pool.map(lambda job: self._batch(*job), jobs))
        return np.concatenate(parts, axis=0)


def make_embedder(spec: EmbedderSpec):
    return SyntheticEmbedder(spec) if spec.kind == SYNTHETIC else ServiceEmbedder(spec)


def embed(spec: EmbedderSpec, texts: Sequence[str], embedder=None, cache: EmbeddingCache | None = None) -> list[Embedding]:
    """Embed ``texts`` in order, serving repeats from ``cache`` when given."""
    texts = list(texts)
    if not texts:
        raise ValueError("embed() needs at least one text")
    if cache is None and spec.cache_path:
        model = spec.model if spec.kind == EXTERNAL else spec.fingerprint
        cache = EmbeddingCache(spec.cache_path, spec.dim, model)
    embedder = embedder or make_embedder(spec)

    vectors: list[np.ndarray | None] = [None] * len(texts)
    missing: list[int] = []
    for i, t in enumerate(texts):
        hit = cache.get(t) if cache is not None else None
        if hit is not None:
            vectors[i] = hit
        else:
            missing.append(i)
    if missing:
        # embed each distinct missing text once
        uniq = list(dict.fromkeys(texts[i] for i in missing))
        fresh = np.asarray(embedder(uniq), dtype=np.float64)
        if fresh.ndim != 2 or fresh.shape[1] != spec.dim:
            raise EmbeddingServiceError(f"embedder produced shape {fresh.shape}, expected dim {spec.dim}")
        lookup = dict(zip(uniq, fresh))
        for i in missing:
            vectors[i] = lookup[texts[i]]
        if cache is not None:
            cache.put_many(list(lookup.items()))
    return [Embedding(np.asarray(v), str(i)) for i, v in enumerate(vectors)]


def stack(embeddings: Sequence[Embedding | np.ndarray]) -> np.ndarray:
    rows = [e.vector if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64) for e in embeddings]
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise ValueError(f"embeddings have inconsistent dimensions {sorted(dims)}")
    return np.ascontiguousarray(np.array(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# clustering


class CentroidSet:
    def __init__(self, centroids, fingerprint: str = "unknown"):
        c = np.array(centroids, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError(f"centroids must be a (k, d) array, got shape {c.shape}")
        if c.shape[0] < 2:
            raise ValueError(f"a centroid set needs k >= 2, got k={c.shape[0]}")
        if np.any(np.all(c == 0, axis=1)) or not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite with nonzero norm")
        if not fingerprint or any(ch.isspace() for ch in fingerprint):
            raise ValueError(f"fingerprint must be a non-empty token without whitespace: {fingerprint!r}")
        self.centroids = c
        self.fingerprint = fingerprint

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, CentroidSet):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.centroids.shape == other.centroids.shape
            and np.array_equal(self.centroids, other.centroids)
        )

    def __repr__(self):
        return f"CentroidSet(k={self.k}, d={self.dim}, fingerprint={self.fingerprint!r})"


class KMeansFit(NamedTuple):
    centers: np.ndarray
    labels: np.ndarray
    inertia_history: list
    n_iter: int
    converged: bool

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[idx].copy()


def _reseed_empty(labels: np.ndarray, d2: np.ndarray, k: int) -> None:
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        # farthest point whose cluster can spare a member
        order = np.argsort(-d2, kind="stable")
        for i in order:
            if counts[labels[i]] > 1:
                counts[labels[i]] -= 1
                labels[i] = j
                d2[i] = 0.0
                counts[j] = 1
                break


def lloyd(points, k: int, rng: np.random.Generator, max_iters: int = 100, tol: float = 1e-8,
          n_init: int = 1) -> KMeansFit:
    """Lloyd's algorithm with k-means++ seeding.

    The within-cluster sum of squares is checked after every assignment step
    and must never increase.  With ``n_init > 1`` the whole run is repeated
    from fresh seedings drawn from ``rng`` and the lowest final objective wins
    (earliest run on ties).
    """
    x = np.ascontiguousarray(points, dtype=np.float64)
    n = x.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if n_init < 1:
        raise ValueError(f"n_init must be >= 1, got {n_init}")
    best = None
    for _ in range(n_init):
        fit = _lloyd_once(x, k, rng, max_iters, tol)
        if best is None or fit.inertia < best.inertia:
            best = fit
    return best


def _lloyd_once(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int, tol: float) -> KMeansFit:
    centers = kmeans_plusplus(x, k, rng)
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        labels, d2 = kernels.assign_nearest(x, centers)
        _reseed_empty(labels, d2, k)
        obj = float(d2.sum())
        if history and obj > history[-1] + 1e-9 * (1.0 + history[-1]):
            raise RuntimeError(f"k-means objective increased at iteration {it}: {history[-1]} -> {obj}")
        history.append(obj)
        new = np.empty_like(centers)
        for j in range(k):
            new[j] = x[labels == j].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            converged = True
            break
    labels, d2 = kernels.assign_nearest(x, centers)
    history.append(float(d2.sum()))
    return KMeansFit(centers, labels, history, it, converged)


def kmeans(embeddings, k: int, rng: np.random.Generator, max_iters: int = 100, tol: float = 1e-8,
           fingerprint: str = "unknown", n_init: int = 1) -> CentroidSet:
    fit = lloyd(stack(embeddings), k, rng, max_iters=max_iters, tol=tol, n_init=n_init)
    return CentroidSet(fit.centers, fingerprint)


def compute_intuition(e, c: CentroidSet) -> np.ndarray:
    """Clamped cosine similarity of one embedding to each centroid."""
    v = e.vector if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
    if v.shape != (c.dim,):
        raise ValueError(f"dimension mismatch: embedding has shape {v.shape}, centroids have d={c.dim}")
    if np.linalg.norm(v) == 0:
        warnings.warn("zero-norm embedding; using uniform intuition", RuntimeWarning, stacklevel=2)
        return np.full(c.k, 1.0 / c.k)
    raw = np.array([cosine_similarity(v, mu) for mu in c.centroids])
    logger.debug("raw intuition %s", raw)
    return np.clip(raw, 0.0, 1.0)


def intuition_matrix(embeddings, c: CentroidSet) -> np.ndarray:
    """Row-wise ``compute_intuition`` for a batch, via the cosine kernel."""
    e = stack(embeddings) if not isinstance(embeddings, np.ndarray) else np.ascontiguousarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != c.dim:
        raise ValueError(f"dimension mismatch: embeddings have shape {e.shape}, centroids have d={c.dim}")
    raw = kernels.cosine_matrix(e, np.ascontiguousarray(c.centroids))
    out = np.clip(raw, 0.0, 1.0)
    zero = np.linalg.norm(e, axis=1) == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm embeddings; using uniform intuition", RuntimeWarning, stacklevel=2)
        out[zero] = 1.0 / c.k
    return out


def build_centroids(texts: Sequence[str], spec: EmbedderSpec, k: int, seed: int,
                    sample_size: int | None = None, max_iters: int = 100, tol: float = 1e-8,
                    normalize: bool = False, embedder=None, n_init: int = 8):
    """Sample, embed and cluster ``texts``; returns (CentroidSet, KMeansFit, sample indices)."""
    rng = make_rng(seed)
    n = len(texts)
    size = min(512 * k, n) if sample_size is None else min(sample_size, n)
    idx = np.sort(rng.choice(n, size=size, replace=False))
    embs = embed(spec, [texts[i] for i in idx], embedder=embedder)
    x = stack(embs)
    if normalize:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    fit = lloyd(x, k, rng, max_iters=max_iters, tol=tol, n_init=n_init)
    return CentroidSet(fit.centers, spec.fingerprint), fit, idx


# ---------------------------------------------------------------------------
# centroid file


def save_centroids(c: CentroidSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{c.k} {c.dim} {c.fingerprint}\n")
        for row in c.centroids:
            fh.write(" ".join("%.17g" % x for x in row) + "\n")


def load_centroids(path) -> CentroidSet:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines()]
    if not lines or not lines[0].strip():
        raise CentroidFileError(f"{path}: missing header section 'k d fingerprint'")
    head = lines[0].split()
    if len(head) != 3:
        raise CentroidFileError(f"{path}:1: header must have 3 fields 'k d fingerprint', found {len(head)}")
    try:
        k, d = int(head[0]), int(head[1])
    except ValueError:
        raise CentroidFileError(f"{path}:1: k and d must be integers, got {head[0]!r} {head[1]!r}") from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != d:
            raise CentroidFileError(f"{path}:{lineno}: expected {d} values in centroid row, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise CentroidFileError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise CentroidFileError(f"{path}: missing centroid section (header declares k={k})")
    if len(rows) != k:
        raise CentroidFileError(f"{path}: header declares k={k} but file contains {len(rows)} centroid rows")
    return CentroidSet(np.array(rows), head[2])


# ---------------------------------------------------------------------------
# evaluation helpers


def adjusted_rand_index(labels_true, labels_pred) -> float:
    a = np.asarray(labels_true)
    b = np.asarray(labels_pred)
    if a.shape != b.shape:
        raise ValueError("label arrays must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return (x * (x - 1) // 2).sum()

    n = a.size
    sum_ij = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def synthetic_blobs(k: int, per_cluster: int, dim: int, separation: float, noise: float,
                    rng: np.random.Generator):
    """Gaussian blobs around orthogonal centres.

    Centres are ``separation * noise / sqrt(2)`` along orthonormal axes, so
    the distance between any two centres divided by ``noise`` equals
    ``separation``.
    """
    if k > dim:
        raise ValueError("synthetic_blobs needs k <= dim")
    q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
    centers = q.T * (separation * noise / np.sqrt(2.0))
    labels = np.repeat(np.arange(k), per_cluster)
    points = centers[labels] + noise * rng.standard_normal((labels.size, dim))
    return points, labels, centers
