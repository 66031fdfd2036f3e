"""Time the compiled k-means assignment kernel against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Reports the raw kernel and a full ``lloyd`` run with each backend patched in.
"""
import argparse
import timeit

import numpy as np

from mor1e import _kernels_py, intuition, kernels
from mor1e.numeric import make_rng

try:
    from mor1e import _kernels
except ImportError:
    _kernels = None


def best_ms(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def run_lloyd(points, k):
    return intuition.lloyd(points, k, make_rng(0), max_iters=50)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':44s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for n, d, k in ((20000, 64, 20), (5000, 16, 4), (2000, 768, 8)):
        pts = np.ascontiguousarray(rng.standard_normal((n, d)))
        cen = np.ascontiguousarray(rng.standard_normal((k, d)))
        rows = [(f"assign_nearest n={n} d={d} k={k}", lambda mod: (lambda: mod.assign_nearest(pts, cen)))]
        rows.append((f"lloyd (<=50 iters) n={n} d={d} k={k}", None))
        for label, make in rows:
            timings = []
            for mod in (_kernels_py, _kernels):
                if mod is None:
                    timings.append(float("nan"))
                    continue
                if make is not None:
                    timings.append(best_ms(make(mod), args.repeat))
                else:
                    saved = kernels.assign_nearest
                    kernels.assign_nearest = mod.assign_nearest
                    try:
                        timings.append(best_ms(lambda: run_lloyd(pts, k), max(1, args.repeat // 2)))
                    finally:
                        kernels.assign_nearest = saved
            t_py, t_c = timings
            print(f"{label:44s} {t_py:10.2f} {t_c:12.2f} {t_py / t_c:7.2f}x")
    if _kernels is not None:
        a = _kernels_py.assign_nearest(pts, cen)
        b = _kernels.assign_nearest(pts, cen)
        print(f"labels identical: {np.array_equal(a[0], b[0])}; max |dist diff|: {np.max(np.abs(a[1] - b[1])):.2e}")


if __name__ == "__main__":
    main()
