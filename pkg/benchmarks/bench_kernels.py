"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--d 64,256] [--repeat 5] [--out kernels.csv]

Each row reports the best-of-``repeat`` wall time per call for one kernel,
backend and size, plus the numpy/numba speed ratio. The two backends are also
checked for agreement on every input they are timed on.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from zloss import kernels

COLUMNS = ("kernel", "size", "backend", "seconds_per_call", "speedup_vs_numpy")


def factored_case(rng, d, D=5000, K=250):
    V = rng.normal(size=(D, d)) / np.sqrt(d)
    G = V.T @ V
    H = rng.normal(size=(K, d)) / np.sqrt(d)
    t = rng.integers(0, D, size=K)
    beta = np.full(K, 1e-3)
    base = dict(U=np.eye(d), U_inv=np.eye(d), G=G, v_bar=V.sum(axis=0), V_store=V,
                omega=np.zeros(d))

    def call(fn):
        a = {k: v.copy() for k, v in base.items()}
        status = np.zeros(2, dtype=np.int64)
        norms = np.array([float(d), float(d)])
        fn(a["U"], a["U_inv"], a["G"], a["v_bar"], a["V_store"], a["omega"], H, t,
           np.full(K, 1e-4), beta, np.full(K, -0.5), 0.01, float(D), norms, np.inf, status)
        return a["U"], a["G"]
    return call


def hsm_case(rng, d, D=20000, K=250):
    m = int(np.ceil(np.sqrt(D)))
    groups = np.array_split(np.arange(D), m)
    offsets = np.zeros(m + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(g) for g in groups])
    cluster_of = np.repeat(np.arange(m), [len(g) for g in groups])
    row_of = np.arange(D)
    Wc, Ww = rng.normal(size=(m, d)) * 0.1, rng.normal(size=(D, d)) * 0.1
    H = rng.normal(size=(K, d))
    t = rng.integers(0, D, size=K)

    def call(fn):
        wc, ww = Wc.copy(), Ww.copy()
        vals, grads = np.empty(K), np.empty((K, d))
        fn(wc, ww, offsets, cluster_of, row_of, H, t, 0.01, vals, grads)
        return vals, grads, ww
    return call


def ranks_case(rng, d, K=250):
    D = d * 100
    S = rng.normal(size=(K, D))
    t = rng.integers(0, D, size=K)

    def call(fn):
        out = np.empty(K, dtype=np.int64)
        fn(S, t, out)
        return (out,)
    return call


CASES = {"factored_apply": factored_case, "hsm_batch": hsm_case, "ranks_into": ranks_case}


def best_time(fn, repeat):
    fn()  # compile / warm caches
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--d", default="64,256", help="comma-separated hidden sizes")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--out")
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    sink = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(sink, fieldnames=COLUMNS)
    writer.writeheader()
    for name, make in CASES.items():
        for d in (int(x) for x in args.d.split(",")):
            call = make(rng, d)
            ref = call(kernels.BACKENDS["numpy"][name])
            got = call(kernels.BACKENDS["numba"][name])
            for x, y in zip(ref, got):
                np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)
            times = {b: best_time(lambda: call(kernels.BACKENDS[b][name]), args.repeat)
                     for b in ("numpy", "numba")}
            for b, sec in times.items():
                writer.writerow({"kernel": name, "size": d, "backend": b,
                                 "seconds_per_call": f"{sec:.6g}",
                                 "speedup_vs_numpy": f"{times['numpy'] / sec:.3g}"})
            sink.flush()
    if sink is not sys.stdout:
        sink.close()


if __name__ == "__main__":
    main()
