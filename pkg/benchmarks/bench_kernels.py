"""Times every kernel's numba and numpy implementations side by side.

Run:  python benchmarks/bench_kernels.py [--repeats 30]

Imports both variants directly (the module-level dispatch is irrelevant here),
warms the jit, then reports best-of-N wall times and the speedup ratio. On a
box without numba the _nb names resolve to the numpy code and the ratio prints
as 1.0x, which is itself a useful sanity signal.
"""

import argparse
import time

import numpy as np

from signlab import kernels as K


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, fn_np, fn_nb, args, repeats, rows):
    fn_nb(*args)  # jit compile outside the timer
    t_np = best_of(fn_np, args, repeats)
    t_nb = best_of(fn_nb, args, repeats)
    rows.append((name, t_np, t_nb))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    rows = []

    N, V = 4096, 512
    logits = rng.standard_normal((N, V))
    targets = rng.integers(0, V, N).astype(np.int64)
    mask = (rng.random(N) < 0.8).astype(np.uint8)
    _, probs = K.softmax_xent_fwd_np(logits, targets, mask)
    bench_case("softmax_xent_fwd (4096x512)", K.softmax_xent_fwd_np,
               K.softmax_xent_fwd_nb, (logits, targets, mask), args.repeats, rows)
    bench_case("softmax_xent_bwd (4096x512)", K.softmax_xent_bwd_np,
               K.softmax_xent_bwd_nb, (probs, targets, mask, 1.0 / N),
               args.repeats, rows)

    T, D = 2048, 256
    x = rng.standard_normal((T, D))
    gamma, beta = np.ones(D), np.zeros(D)
    y, mu, rstd = K.layernorm_fwd_np(x, gamma, beta, 1e-5)
    bench_case("layernorm_fwd (2048x256)", K.layernorm_fwd_np,
               K.layernorm_fwd_nb, (x, gamma, beta, 1e-5), args.repeats, rows)
    gy = rng.standard_normal((T, D))
    bench_case("layernorm_bwd (2048x256)", K.layernorm_bwd_np,
               K.layernorm_bwd_nb, (gy, x, gamma, mu, rstd), args.repeats, rows)

    P = 1_000_000
    p = rng.standard_normal(P)
    g = rng.standard_normal(P)
    m = np.zeros(P)
    v = np.zeros(P)
    bench_case("adamw_update (1M params)",
               lambda *a: K.adamw_update_np(p.copy(), *a),
               lambda *a: K.adamw_update_nb(p.copy(), *a),
               (g, m.copy(), v.copy(), 1e-3, 0.9, 0.999, 1e-8, 0.01, 5),
               args.repeats, rows)

    a = rng.integers(0, 30, 900).astype(np.int64)
    b = rng.integers(0, 30, 900).astype(np.int64)
    bench_case("lcs_length (900x900)", K.lcs_length_np, K.lcs_length_nb,
               (a, b), args.repeats, rows)

    print(f"numba active: {K.NUMBA_ACTIVE} (SIGNLAB_NUMBA honored at import)")
    print(f"{'kernel':<30} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, t_np, t_nb in rows:
        ratio = t_np / t_nb if t_nb > 0 else float("inf")
        print(f"{name:<30} {t_np * 1e3:>8.3f}ms {t_nb * 1e3:>8.3f}ms {ratio:>7.1f}x")


if __name__ == "__main__":
    main()
