"""Adam + cosine schedule training loop and metrics for the toy benchmark."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .intuition import CentroidSet, EmbedderSpec, embed, intuition_matrix, stack
from .numeric import derive_seed, make_rng
from .rank1 import FUSION_NONE, FUSION_TASKCAT, category_encoding
from .toymodel import ToyDataset, ToyModel, ToyModelConfig, oracle_reference

logger = logging.getLogger(__name__)

CONSTANT = "constant"
COSINE = "cosine"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 64
    epochs: int = 3
    schedule: str = COSINE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.schedule not in (CONSTANT, COSINE):
            raise ValueError(f"schedule must be {CONSTANT!r} or {COSINE!r}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, step_index: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.  ``step_index`` starts at 1."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step_index)
        v_hat = v / (1.0 - beta2**step_index)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)  # (step, epoch, lr, loss)
    accuracy: list = field(default_factory=list)  # (epoch, split, task_id, accuracy)
    entropy: list = field(default_factory=list)  # (epoch, layer, entropy)
    wall_clock: list = field(default_factory=list)  # seconds per epoch
    trainable_params: int = 0
    model: object = field(default=None, repr=False, compare=False)

    def final_accuracy(self, split: str = "eval") -> float:
        rows = [r for r in self.accuracy if r[1] == split and r[2] == "all"]
        return rows[-1][3]

    def epoch_mean_losses(self) -> list:
        by_epoch: dict = {}
        for _, epoch, _, loss in self.steps:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def write_csv(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "task_id", "accuracy"])
            w.writerows([(e, s, t, repr(a)) for e, s, t, a in self.accuracy])
        with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "lr", "loss"])
            w.writerows([(s, e, repr(lr), repr(l)) for s, e, lr, l in self.steps])
        with open(os.path.join(out_dir, "routing.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "layer", "entropy"])
            w.writerows([(e, layer, repr(h)) for e, layer, h in self.entropy])


def stratified_split(task_ids, seed: int, eval_fraction: float = 0.2):
    """Deterministic per-task split into (train, eval) index arrays."""
    rng = make_rng(derive_seed(seed, "split"))
    task_ids = np.asarray(task_ids)
    train, held = [], []
    for t in np.unique(task_ids):
        idx = np.flatnonzero(task_ids == t)
        idx = idx[rng.permutation(idx.size)]
        n_eval = int(round(eval_fraction * idx.size))
        held.append(idx[:n_eval])
        train.append(idx[n_eval:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def build_reference(data: ToyDataset, fusion: str, n_experts: int, source=None,
                    embedder: EmbedderSpec | None = None) -> np.ndarray | None:
    """Per-instance routing reference: none, task-category code, or intuition.

    ``source`` selects the intuition route: ``"oracle"`` for one-hot task
    similarity, or a CentroidSet for the embed-and-compare pipeline.
    """
    if fusion == FUSION_NONE:
        return None
    if fusion == FUSION_TASKCAT:
        # categories are 1-based so that no category encodes to the zero vector
        return np.array([category_encoding(t + 1, n_experts) for t in data.task_ids])
    if source is None:
        raise ValueError("intuition fusion needs an intuition source (centroids or 'oracle')")
    if isinstance(source, str):
        if source != "oracle":
            raise ValueError(f"unknown intuition source {source!r}")
        return oracle_reference(data.task_ids, n_experts)
    if not isinstance(source, CentroidSet):
        raise TypeError("intuition source must be 'oracle' or a CentroidSet")
    if source.k != n_experts:
        raise ValueError(f"intuition fusion needs K == N, got K={source.k} centroids and N={n_experts} experts")
    spec = embedder or EmbedderSpec(dim=source.dim)
    embs = embed(spec, data.texts())
    return intuition_matrix(stack(embs), source)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else 0.0


def run_experiment(model_config: ToyModelConfig, train_config: TrainConfig, data: ToyDataset,
                   reference: np.ndarray | None = None, on_epoch=None) -> MetricsLog:
    if len(data) == 0:
        raise ValueError("no training data")
    model = ToyModel(model_config)
    if model.needs_reference and reference is None:
        raise ValueError(f"fusion {model_config.fusion!r} needs per-instance reference vectors")
    ref = reference if model.needs_reference else None
    train_idx, eval_idx = stratified_split(data.task_ids, train_config.seed)
    train_b = data.batch(train_idx, ref)
    eval_b = data.batch(eval_idx, ref)

    bs = train_config.batch_size
    per_epoch = math.ceil(len(train_idx) / bs)
    total = per_epoch * train_config.epochs
    params = model.params()
    state = AdamState()
    log = MetricsLog(trainable_params=model.num_trainable())
    shuffle_rng = make_rng(derive_seed(train_config.seed, "shuffle"))
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_idx))
        for start in range(0, len(order), bs):
            batch = train_b.subset(order[start : start + bs])
            lr = (cosine_lr(train_config.learning_rate, step, total)
                  if train_config.schedule == COSINE else train_config.learning_rate)
            loss, grads = model.backward(batch)
            if not np.isfinite(loss):
                site = model.layer_outputs_finite(batch) or "head"
                raise TrainingDiverged(f"non-finite loss at step {step + 1} (epoch {epoch}); first bad layer: {site}")
            step += 1
            adam_step(params, grads, state, step, lr, train_config.beta1, train_config.beta2, train_config.eps)
            log.steps.append((step, epoch, lr, loss))

        for split, b in (("train", train_b), ("eval", eval_b)):
            logits = model.forward(b)
            log.accuracy.append((epoch, split, "all", accuracy(logits, b.labels)))
            if split == "eval":
                for t in np.unique(b.task_ids):
                    sel = b.task_ids == t
                    log.accuracy.append((epoch, split, int(t), accuracy(logits[sel], b.labels[sel])))
        for layer, h in model.routing_entropies(eval_b).items():
            log.entropy.append((epoch, layer, h))
        log.wall_clock.append(time.perf_counter() - t0)
        logger.info("epoch %d: loss %.4f eval acc %.4f", epoch, log.epoch_mean_losses()[-1],
                    log.final_accuracy("eval"))
        if on_epoch is not None:
            on_epoch(epoch, model, log)
    log.model = model
    return log
