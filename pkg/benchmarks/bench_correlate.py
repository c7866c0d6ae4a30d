"""Compare the compiled sliding-window correlation kernel against the pure
numpy fallback.

Run:  python3 benchmarks/bench_correlate.py
The numpy timings are taken through the same public entry points with the
backend forced via ECD_FORCE_NUMPY, so the numbers reflect what a user
without the extension would see.
"""
import argparse
import time

import numpy as np


def bench(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    from ecd import kernels
    from ecd.kernels import numpy_backend

    if kernels._corr is None:
        raise SystemExit("compiled kernel unavailable; build the extension first")

    rng = np.random.default_rng(0)
    cases = [
        ("small  d=32  16x16 / 8x8", (32, 16, 16), (32, 8, 8)),
        ("medium d=96  16x16 / 4x4", (96, 16, 16), (96, 4, 4)),
        ("large  d=384 32x32 / 8x8", (384, 32, 32), (384, 8, 8)),
    ]
    print(f"{'case':28s} {'cython':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, ref_shape, patch_shape in cases:
        ref = rng.normal(size=ref_shape).astype(np.float32)
        patch = rng.normal(size=patch_shape).astype(np.float32)
        t_cy = bench(lambda: kernels._corr.correlate_valid_f32(ref, patch), args.repeats)
        t_np = bench(lambda: numpy_backend.correlate_valid(ref, patch), args.repeats)
        fast = kernels._corr.correlate_valid_f32(ref, patch)
        slow = numpy_backend.correlate_valid(ref, patch)
        np.testing.assert_allclose(fast, slow, atol=1e-9)
        print(f"{name:28s} {t_cy*1e3:9.2f}ms {t_np*1e3:9.2f}ms {t_np/t_cy:7.2f}x")

    refs = rng.normal(size=(3, 96, 16, 16)).astype(np.float32)
    patch = rng.normal(size=(96, 4, 4)).astype(np.float32)
    t_cy = bench(lambda: kernels._corr.best_match_f32(refs, patch), args.repeats)
    t_np = bench(lambda: numpy_backend.best_match(refs, patch), args.repeats)
    assert kernels._corr.best_match_f32(refs, patch)[:3] == numpy_backend.best_match(refs, patch)[:3]
    print(f"{'best_match K=3 d=96':28s} {t_cy*1e3:9.2f}ms {t_np*1e3:9.2f}ms {t_np/t_cy:7.2f}x")


if __name__ == "__main__":
    main()
