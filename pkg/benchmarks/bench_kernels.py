"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--points N]

Shapes follow the desk-scale workload: gate logits for a 256-row batch over
8 experts, hidden activations of 256 x 512, Adam on a 128 x 512 weight and the
per-frame neighborhood descriptors.
"""

import argparse
import statistics
import time

import numpy as np

from gzsl_moe import _kernels_py

try:
    from gzsl_moe import _ckernels
except ImportError:
    _ckernels = None


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times), statistics.median(times)


def cases(n_points, rng):
    logits = rng.normal(size=(256, 8))
    pts = rng.uniform(0, 5, size=(n_points, 3))
    act = rng.normal(size=(256, 512))
    dy = rng.normal(size=act.shape)
    p = rng.normal(size=(128, 512))
    g = rng.normal(size=p.shape)

    def adam(mod):
        m, v, q = np.zeros_like(p), np.zeros_like(p), p.copy()
        return lambda: mod.adam_step(q, g, m, v, 5e-4, 0.92, 0.98, 0.08, 0.02, 1e-8, 1e-4)

    return [
        ("topk_select 256x8 k=2", lambda mod: (lambda: mod.topk_select(logits, 2))),
        (f"knn_descriptors {n_points} pts k=16", lambda mod: (lambda: mod.knn_descriptors(pts, 16))),
        ("gelu 256x512", lambda mod: (lambda: mod.gelu(act))),
        ("gelu_backward 256x512", lambda mod: (lambda: mod.gelu_backward(act, dy))),
        ("adam_step 128x512", adam),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--points", type=int, default=2920, help="points per frame (desk scale: 2920)")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, make in cases(args.points, rng):
        repeat = max(3, args.repeat // 5) if name.startswith("knn") else args.repeat
        py, _ = _best(make(_kernels_py), repeat)
        cy, _ = _best(make(_ckernels), repeat)
        print(f"{name:<34}{py * 1e3:>12.3f}{cy * 1e3:>12.3f}{py / cy:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
