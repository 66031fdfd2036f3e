"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""
import time

import numpy as np
import pytest

from conftest import check_param_grads
from mor1e.baselines import (
    SHIPPED_ARCHS,
    LoraLayer,
    MoLoraLayer,
    Scheme,
    count_flops,
    count_params,
    load_arch,
)
from mor1e.cli import main as cli_main
from mor1e.intuition import (
    EmbedderSpec,
    adjusted_rand_index,
    build_centroids,
    compute_intuition,
    CentroidSet,
    lloyd,
    synthetic_blobs,
)
from mor1e.numeric import derive_seed, make_rng
from mor1e.rank1 import DIAGONAL, FULL, Rank1MoeLayer, Router, forward, forward_naive, topk_mask
from mor1e.toymodel import SyntheticTaskSpec, ToyBatch, ToyModel, ToyModelConfig, generate_multitask_data
from mor1e.trainer import TrainConfig, build_reference, run_experiment


@pytest.fixture
def report(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print("\n" + line)
        lines.append(line)
        assert ok, line

    return _report


ACCEPTANCE_KEY = pytest.StashKey[list]()


def _random_rank1(rng, routing):
    m, n = (int(v) for v in rng.integers(1, 65, size=2))
    N = int(rng.integers(1, 9))
    rows = N if routing == DIAGONAL else N * N
    router = Router(rng.standard_normal((rows, n)), rng.standard_normal(rows), routing)
    return Rank1MoeLayer(rng.standard_normal((m, n)), rng.standard_normal((m, N)), rng.standard_normal((n, N)), router)


def test_criterion_1_factored_equals_naive(report):
    t0 = time.perf_counter()
    rng = make_rng(1)
    worst = {}
    for routing in (DIAGONAL, FULL):
        errs = []
        for _ in range(200):
            layer = _random_rank1(rng, routing)
            x = rng.standard_normal(layer.w.shape[1])
            errs.append(np.max(np.abs(forward(layer, x) - forward_naive(layer, x))))
        worst[routing] = max(errs)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-10 and secs < 5
    report(1, ok, f"max |forward - naive| diag {worst[DIAGONAL]:.2e}, full {worst[FULL]:.2e} "
                  f"(200 layers each, tol 1e-10), {secs:.2f}s (limit 5s)")


def _grad_cases(rng):
    def rank1(routing, fusion):
        m, n = (int(v) for v in rng.integers(2, 17, size=2))
        N = int(rng.integers(1, 5))
        rows = N if routing == DIAGONAL else N * N
        router = Router(rng.standard_normal((rows, n)), rng.standard_normal(rows), routing)
        layer = Rank1MoeLayer(rng.standard_normal((m, n)), rng.standard_normal((m, N)),
                              rng.standard_normal((n, N)), router, fusion)
        ref = rng.random((3, N)) if fusion != "none" else None
        return layer, ref

    for routing in (DIAGONAL, FULL):
        for fusion in ("none", "intuition", "taskcat"):
            yield f"rank1/{routing}/{fusion}", rank1(routing, fusion)
    m, n = (int(v) for v in rng.integers(2, 17, size=2))
    lora = LoraLayer(rng.standard_normal((m, n)), rng.standard_normal((4, n)), rng.standard_normal((m, 4)), 2.0)
    yield "lora", (lora, None)
    router = Router(rng.standard_normal((3, n)), rng.standard_normal(3))
    for top_k in (None, 2):
        molora = MoLoraLayer(rng.standard_normal((m, n)), rng.standard_normal((3, 2, n)),
                             rng.standard_normal((3, m, 2)), router, top_k=top_k)
        yield f"molora/top_k={top_k}", (molora, None)


def test_criterion_2_gradients(report):
    t0 = time.perf_counter()
    rng = make_rng(2)
    layer_worst = 0.0
    for _, (layer, ref) in _grad_cases(rng):
        x = rng.standard_normal((3, layer.w.shape[1]))
        up = rng.standard_normal((3, layer.w.shape[0]))
        _, cache = layer.forward_cache(x, ref)
        grads, _ = layer.backward(cache, up)
        worst = check_param_grads(layer.params(), grads, lambda: float(np.sum(up * layer.forward_cache(x, ref)[0])))
        layer_worst = max(layer_worst, max(worst.values()))

    model_worst = 0.0
    small = dict(vocab_size=12, embed_dim=8, ffn_dim=16, seq_len=5, num_classes=3, experts=3, rank=2)
    variants = [dict(scheme="lora"), dict(scheme="molora"), dict(scheme="mor1e"),
                dict(scheme="mor1e", fusion="intuition"), dict(scheme="mor1e", routing=FULL, fusion="intuition")]
    for v in variants:
        cfg = ToyModelConfig(**small, **v)
        model = ToyModel(cfg)
        for layer in model.adapters.values():
            up = layer.u_bank if hasattr(layer, "u_bank") else layer.a_up
            up[...] = 0.5 * rng.standard_normal(up.shape)
        ref = rng.random((2, 3)) if model.needs_reference else None
        batch = ToyBatch(rng.integers(0, 12, size=(2, 5)), rng.integers(0, 3, size=2), np.zeros(2, int), ref)
        _, grads = model.backward(batch)
        worst = check_param_grads(model.params(), grads, lambda: model.backward(batch)[0])
        model_worst = max(model_worst, max(worst.values()))
    secs = time.perf_counter() - t0
    ok = layer_worst < 1e-5 and model_worst < 1e-4 and secs < 60
    report(2, ok, f"worst rel err layers {layer_worst:.2e} (tol 1e-5), toy model {model_worst:.2e} (tol 1e-4), "
                  f"{secs:.1f}s (limit 60s)")


def test_criterion_3_intuition_recovery(report):
    t0 = time.perf_counter()
    good_seeds = 0
    held_hits = held_total = 0
    for seed in range(10):
        rng = make_rng(seed)
        pts, labels, centers = synthetic_blobs(4, 50, 16, 5.0, 1.0, rng)
        fit = lloyd(pts, 4, rng)
        ari = adjusted_rand_index(labels, fit.labels)
        good_seeds += ari >= 0.9
        # map each recovered cluster to its majority planted label
        to_true = {j: int(np.bincount(labels[fit.labels == j], minlength=4).argmax()) for j in range(4)}
        cs = CentroidSet(fit.centers, "blobs")
        truth = rng.integers(0, 4, size=20)
        held = centers[truth] + rng.standard_normal((20, 16))
        for e, t in zip(held, truth):
            held_hits += to_true[int(np.argmax(compute_intuition(e, cs)))] == t
            held_total += 1
    secs = time.perf_counter() - t0
    rate = held_hits / held_total
    ok = good_seeds >= 9 and rate >= 0.95 and secs < 10
    report(3, ok, f"ARI >= 0.9 on {good_seeds}/10 seeds (need 9), held-out top score on true cluster "
                  f"{rate:.1%} (need 95%), {secs:.2f}s (limit 10s)")


def test_criterion_4_noop_init(report):
    rng = make_rng(4)
    schemes = [dict(scheme="lora"), dict(scheme="molora"), dict(scheme="molora", top_k=2), dict(scheme="mor1e"),
               dict(scheme="mor1e", fusion="intuition"), dict(scheme="mor1e", fusion="taskcat"),
               dict(scheme="mor1e", routing=FULL), dict(scheme="mor1e", routing=FULL, fusion="intuition")]
    worst = 0.0
    for s in schemes:
        cfg = ToyModelConfig(experts=4, rank=4, **s)
        model = ToyModel(cfg)
        ref = rng.random((100, 4)) if model.needs_reference else None
        batch = ToyBatch(rng.integers(0, cfg.vocab_size, size=(100, cfg.seq_len)), np.zeros(100, int),
                         np.zeros(100, int), ref)
        delta = np.max(np.abs(model.forward(batch) - model.forward(batch, use_adapters=False)))
        worst = max(worst, delta)
    report(4, worst < 1e-12, f"max |logits - frozen base| over {len(schemes)} scheme variants x 100 inputs "
                             f"= {worst:.1e} (tol 1e-12)")


def test_criterion_5_routing_reference_ablation(report):
    t0 = time.perf_counter()
    arms = {"none": [], "taskcat": [], "intuition": [], "oracle": []}
    aris = []
    for seed in range(5):
        spec = SyntheticTaskSpec(k_tasks=4, separation=0.5)
        data_seed = derive_seed(seed, "data")
        data = generate_multitask_data(spec, 1200, make_rng(data_seed), data_seed)
        embedder = EmbedderSpec(dim=16, seed=seed)
        centroids, fit, idx = build_centroids(data.texts(), embedder, 4, derive_seed(seed, "cluster"))
        aris.append(adjusted_rand_index(data.task_ids[idx], fit.labels))
        for arm in arms:
            fusion = "intuition" if arm == "oracle" else arm
            source = "oracle" if arm == "oracle" else centroids
            ref = build_reference(data, fusion, 4, source, embedder)
            cfg = ToyModelConfig(vocab_size=spec.vocab_size, experts=4, fusion=fusion, seed=seed)
            log = run_experiment(cfg, TrainConfig(learning_rate=1e-2, batch_size=64, epochs=10, seed=seed), data, ref)
            arms[arm].append(log.final_accuracy())
    secs = time.perf_counter() - t0
    med = {k: float(np.median(v)) for k, v in arms.items()}
    order = " > ".join(f"{k} {med[k]:.4f}" for k in sorted(med, key=med.get, reverse=True))
    ok = med["intuition"] >= med["none"] and secs < 600
    report(5, ok, f"5-seed median eval accuracy (embedded k-means intuition; oracle one-hot shown for reference): "
                  f"{order}; clustering ARI median {np.median(aris):.2f}; {secs:.0f}s (limit 600s)")


PUBLISHED_PARAMS = 77.3e6


def test_criterion_6_parameter_counts(report):
    t0 = time.perf_counter()
    lora, molora, mor1e = (Scheme("lora", rank=32), Scheme("molora", rank=4, experts=8),
                           Scheme("mor1e", experts=20, fusion="intuition"))
    ref = count_params(load_arch("7b"), mor1e).trainable_params
    rel = (ref - PUBLISHED_PARAMS) / PUBLISHED_PARAMS
    rows, ordered = [], True
    for name in SHIPPED_ARCHS:
        arch = load_arch(name)
        p = [count_params(arch, s).trainable_params for s in (mor1e, lora, molora)]
        ordered &= p[0] < p[1] < p[2]
        rows.append(f"{name} {p[0] / 1e6:.1f}M<{p[1] / 1e6:.1f}M<{p[2] / 1e6:.1f}M")
    secs = time.perf_counter() - t0
    ok = abs(rel) < 0.10 and ordered and secs < 1
    report(6, ok, f"7b MoR1E N=20 = {ref / 1e6:.2f}M ({rel:+.1%} vs 77.3M, tol 10%); Rank-1<LoRA<MoLoRA: "
                  f"{'; '.join(rows)}; {secs * 1e3:.0f}ms")


def test_criterion_7_flop_ordering(report):
    t0 = time.perf_counter()
    schemes = (Scheme("mor1e", experts=20, fusion="intuition"), Scheme("lora", rank=32),
               Scheme("molora", rank=4, experts=8))
    rows, ordered = [], True
    for name in SHIPPED_ARCHS:
        f = [count_flops(load_arch(name), s).extra_flops_per_token for s in schemes]
        ordered &= f[0] < f[1] < f[2]
        rows.append(f"{name} {f[0] / 1e6:.1f}M<{f[1] / 1e6:.1f}M<{f[2] / 1e6:.1f}M")
    secs = time.perf_counter() - t0
    report(7, ordered and secs < 1, f"extra FLOPs/token Rank-1<LoRA<MoLoRA: {'; '.join(rows)}; {secs * 1e3:.0f}ms")


def test_criterion_8_train_determinism(report, tmp_path, capsys):
    argv = ["train", "--fusion", "intuition", "--oracle-intuition", "--data", "tasks=4,count=200",
            "--epochs", "3", "--seed", "11"]
    codes = [cli_main(argv + ["--out", str(tmp_path / run)]) for run in ("a", "b")]
    capsys.readouterr()
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("metrics.csv", "losses.csv", "routing.csv"))
    report(8, codes == [0, 0] and same, f"two identical train runs: exit codes {codes}, metrics/losses/routing "
                                        f"CSVs bit-identical: {same}")


def test_criterion_9_topk(report):
    rng = make_rng(9)
    failures = 0
    for case in range(1000):
        n = int(rng.integers(1, 10))
        # coarse values make ties common
        g = rng.integers(1, 5, size=n).astype(float) if case % 2 else rng.random(n)
        g = g / g.sum()
        k = int(rng.integers(1, n + 1))
        out = topk_mask(g, k)
        keep = sorted(range(n), key=lambda i: (-g[i], i))[:k]
        expected = np.zeros(n)
        expected[keep] = g[keep] / g[keep].sum()
        ok = (np.all(out >= 0) and abs(out.sum() - 1) < 1e-12 and set(np.flatnonzero(out)) == set(keep)
              and np.max(np.abs(out - expected)) < 1e-15)
        failures += not ok
    report(9, failures == 0, f"{1000 - failures}/1000 random gates match the sort-based oracle "
                             f"(support, index tie-break, renormalisation)")
