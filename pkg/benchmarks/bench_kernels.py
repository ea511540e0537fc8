"""Timing comparison: compiled kernels vs the numpy reference backend.

Runs both implementations on identical inputs, checks bit-identical
outputs, then reports per-call wall time and the speedup ratio.
"""
import time

import numpy as np

from vistok._kernels import BACKEND, adam_update, nearest_code, reference
from vistok.rng import RngStream


def _time(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_nearest_code():
    rng = RngStream(7)
    print("nearest_code (n queries x K codes, d=8)")
    for n, k in ((1024, 512), (8192, 512), (8192, 8192), (65536, 512)):
        q = rng.child(("q", n, k)).normal((n, 8)).astype(np.float64)
        cb = rng.child(("cb", n, k)).normal((k, 8)).astype(np.float64)
        got = nearest_code(q, cb)
        ref = reference.nearest_code(q, cb)
        assert np.array_equal(got, ref), "backend outputs differ"
        t_fast = _time(nearest_code, q, cb)
        t_ref = _time(reference.nearest_code, q, cb)
        print(f"  n={n:6d} K={k:5d}  {BACKEND}: {t_fast * 1e3:8.2f} ms  "
              f"numpy: {t_ref * 1e3:8.2f} ms  ratio {t_ref / t_fast:5.2f}x")


def bench_adam():
    rng = RngStream(8)
    print("adam_update (flat float32 buffers)")
    for size in (1 << 14, 1 << 18, 1 << 22):
        base = rng.child(("p", size)).normal((size,)).astype(np.float32)
        grad = rng.child(("g", size)).normal((size,)).astype(np.float32)

        def fresh():
            return base.copy(), grad.copy(), np.zeros(size, np.float32), np.zeros(size, np.float32)

        p1, g1, m1, v1 = fresh()
        p2, g2, m2, v2 = fresh()
        adam_update(p1, g1, m1, v1, 1e-3, 0.9, 0.99, 1e-8, 3)
        reference.adam_update(p2, g2, m2, v2, 1e-3, 0.9, 0.99, 1e-8, 3)
        assert np.array_equal(p1, p2) and np.array_equal(m1, m2) and np.array_equal(v1, v2)

        args1 = fresh()
        args2 = fresh()
        t_fast = _time(lambda: adam_update(*args1, 1e-3, 0.9, 0.99, 1e-8, 3))
        t_ref = _time(lambda: reference.adam_update(*args2, 1e-3, 0.9, 0.99, 1e-8, 3))
        print(f"  size={size:8d}  {BACKEND}: {t_fast * 1e3:8.3f} ms  "
              f"numpy: {t_ref * 1e3:8.3f} ms  ratio {t_ref / t_fast:5.2f}x")


if __name__ == "__main__":
    print(f"active backend: {BACKEND}")
    if BACKEND != "compiled":
        print("note: extension not built, timing numpy against itself")
    bench_nearest_code()
    bench_adam()
