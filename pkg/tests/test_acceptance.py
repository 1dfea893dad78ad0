"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the PASS/FAIL lines are
collected and repeated in the terminal summary, see ``conftest.py``) or directly with ``python tests/test_acceptance.py``. Criterion 8 is a
multi-minute training sweep and only runs when ``ZLOSS_SLOW=1``.
"""

from __future__ import annotations

import math
import os
import sys
import time

import numpy as np
import pytest

from zloss.cli import bench_cell
from zloss.corpus import NgramDataset, build_vocab, encode_ngrams, synthetic_corpus
from zloss.factored import FactoredLayer
from zloss.heads import HSMHead
from zloss.losses import (ALL_KINDS, SphericalStats, ZLossParams, dense_eval, grad_tolerance,
                          gradient_sweep, softplus, spherical_eval, standardize_rows)
from zloss.metrics import DEFAULT_KSET, aggregate, constant_baseline, ranks_batch
from zloss.model import ModelConfig, NgramModel, TrainConfig, train

SLOW = os.environ.get("ZLOSS_SLOW", "0").lower() in {"1", "true", "yes", "on"}


# read by the terminal-summary hook in conftest.py
ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


def check(number: int, results: list[tuple[str, bool]]) -> None:
    ok = all(passed for _, passed in results)
    failed = [name for name, passed in results if not passed]
    detail = "; ".join(name for name, _ in results)
    report(number, ok, detail if ok else "failed: " + "; ".join(failed))
    assert ok, "\n".join(failed)


# --------------------------------------------------------------------------
# 1. gradient oracle
# --------------------------------------------------------------------------


def test_c1_gradient_oracle():
    t0 = time.perf_counter()
    results = gradient_sweep(ALL_KINDS, (5, 50, 1000), trials=100, seed=2024)
    elapsed = time.perf_counter() - t0
    rows = []
    for (kind, D), (worst, skipped) in results.items():
        tol = grad_tolerance(kind)
        rows.append((f"{kind} D={D} err={worst:.2e} (tol {tol:.0e}, {skipped} skipped)",
                     worst <= tol))
    rows.append((f"runtime {elapsed:.1f}s < 60s", elapsed < 60))
    check(1, rows)


# --------------------------------------------------------------------------
# 2. factored / dense exactness
# --------------------------------------------------------------------------


@pytest.mark.parametrize("kind,params", [("zloss", ZLossParams(0.1, 10.0)), ("mse", None),
                                         ("taylor", None)])
def test_c2_factored_matches_dense(kind, params):
    D, d, steps, eta = 300, 8, 200, 0.1
    rng = np.random.default_rng(11)
    layer = FactoredLayer.init(D, d, 0.1, seed=3)
    W = layer.materialize().copy()
    worst_stat = 0.0
    for _ in range(steps):
        h = rng.normal(size=d) / math.sqrt(d)
        c = int(rng.integers(D))
        cache = layer.forward(h, c)
        o = W @ h
        ref = SphericalStats.from_outputs(o, c)
        got = cache.stats
        for x, y in ((got.q, ref.q), (got.s_sq, ref.s_sq), (got.o_c, ref.o_c)):
            worst_stat = max(worst_stat, abs(x - y) / max(abs(y), 1.0))
        _, grad = spherical_eval(kind, got, params)
        layer.sgd_update(cache, grad, eta)
        _, g = dense_eval(kind, o, c, params)
        W -= eta * np.outer(g, h)
    dist = np.linalg.norm(layer.materialize() - W) / np.linalg.norm(W)
    check(2, [(f"{kind}: weight distance {dist:.2e} <= 1e-8", dist <= 1e-8),
              (f"{kind}: stats distance {worst_stat:.2e} <= 1e-8", worst_stat <= 1e-8)])


# --------------------------------------------------------------------------
# 3. long-run stability
# --------------------------------------------------------------------------


def test_c3_long_run_stability():
    D, d = 1000, 16
    params = ZLossParams(0.1, 10.0)
    rng = np.random.default_rng(5)
    layer = FactoredLayer.init(D, d, 0.1, seed=8, refactor_period=512)
    worst = {"uinv_drift": 0.0, "vbar_drift": 0.0, "g_drift": 0.0}
    for step in range(10_000):
        h = rng.normal(size=d) / math.sqrt(d)
        cache = layer.forward(h, int(rng.integers(D)))
        _, grad = spherical_eval("zloss", cache.stats, params)
        layer.sgd_update(cache, grad, 0.1)
        if step % 97 == 0 or step == 9_999:
            for k, v in layer.integrity_check().items():
                if k in worst:
                    worst[k] = max(worst[k], v)
    before = layer.materialize().copy()
    layer.refactorize()
    change = np.linalg.norm(layer.materialize() - before) / np.linalg.norm(before)
    rows = [(f"{k} {v:.2e} <= 1e-6", v <= 1e-6) for k, v in worst.items()]
    rows.append((f"refactorization change {change:.2e} <= 1e-10", change <= 1e-10))
    rows.append((f"{layer.refactor_count} refactorizations", layer.refactor_count >= 19))
    check(3, rows)


# --------------------------------------------------------------------------
# 4. D-independence timing
# --------------------------------------------------------------------------


def test_c4_d_independence_timing():
    # d=128 keeps the D=200000 dense matrix within desktop memory
    d, batch, steps = 128, 250, 20
    ratios = {}
    t0 = time.perf_counter()
    for head in ("factored", "hsm", "dense"):
        cost = [bench_cell(head, "zloss", D, d, batch, steps, max_seconds=20.0)[
            "sec_per_1k_examples_output_only"] for D in (20_000, 200_000)]
        ratios[head] = cost[1] / cost[0]
    elapsed = time.perf_counter() - t0
    check(4, [(f"factored ratio {ratios['factored']:.2f} <= 1.5", ratios["factored"] <= 1.5),
              (f"dense ratio {ratios['dense']:.2f} >= 5", ratios["dense"] >= 5),
              (f"hsm ratio {ratios['hsm']:.2f} in [2, 5]", 2 <= ratios["hsm"] <= 5),
              (f"runtime {elapsed:.0f}s < 600s", elapsed < 600)])


# --------------------------------------------------------------------------
# 5. Z-loss analytics
# --------------------------------------------------------------------------


def _stress_vectors(rng, n, D):
    kind = rng.integers(0, 4, size=n)
    O = rng.normal(size=(n, D))
    O[kind == 1] = rng.standard_cauchy(size=(int((kind == 1).sum()), D))
    spikes = np.flatnonzero(kind == 2)
    O[spikes] = 0.0
    O[spikes, rng.integers(0, D, size=spikes.size)] = rng.normal(size=spikes.size) * 1e3
    O[kind == 3] = rng.exponential(size=(int((kind == 3).sum()), D)) * 1e-3 + 7.0
    return O


def test_c5_zloss_analytics():
    rng = np.random.default_rng(3)
    rows = []
    for D in (2, 10, 1000):
        worst = 0.0
        remaining = 100_000
        while remaining:
            n = min(remaining, 2_000_000 // D)
            Z, _, _, degen = standardize_rows(_stress_vectors(rng, n, D))
            worst = max(worst, float(np.abs(Z[~degen]).max() - math.sqrt(D - 1)))
            remaining -= n
        rows.append((f"|z| bound D={D} excess {worst:.1e}", worst <= 1e-9))

    p = ZLossParams(0.7, 5.0)
    inv = 0.0
    for _ in range(200):
        D = int(rng.integers(3, 400))
        o = rng.normal(size=D)
        c = int(rng.integers(D))
        s, t = rng.uniform(0.01, 100), rng.normal() * 50
        for kind in ("zloss", "sz"):
            inv = max(inv, abs(dense_eval(kind, s * o + t, c, p)[0] - dense_eval(kind, o, c, p)[0]))
    rows.append((f"affine invariance {inv:.1e} <= 1e-9", inv <= 1e-9))

    sums = 0.0
    for _ in range(200):
        D = int(rng.integers(2, 1000))
        o = rng.normal(size=D) * 3 + 1
        c = int(rng.integers(D))
        for kind, prm in (("zloss", p), ("logsoftmax", None)):
            sums = max(sums, abs(dense_eval(kind, o, c, prm)[1].sum()) / D)
    rows.append((f"gradient sums / D {sums:.1e} <= 1e-10", sums <= 1e-10))

    params = ZLossParams(0.1, 10.0)
    for D in (10, 1000):
        c = 0
        z_star = np.full(D, -1.0 / math.sqrt(D - 1))
        z_star[c] = math.sqrt(D - 1)
        best = spherical_eval("zloss", SphericalStats.from_outputs(z_star, c), params)[0]
        Z, _, _, _ = standardize_rows(rng.normal(size=(10_000, D)))
        vals = softplus(params.a * (params.b - Z[:, c])) / params.a
        rows.append((f"z* optimal D={D} margin {vals.min() - best:.2e}", bool(np.all(vals > best))))

    D = 1000
    o = np.zeros(D)
    o[0] = -1.0  # z_0 = -sqrt(D - 1)
    z_c = -math.sqrt(D - 1)
    asym = 0.0
    for a in (0.5, 1.0, 4.0):
        b = z_c + 30 / a
        value, _ = spherical_eval("zloss", SphericalStats.from_outputs(o, 0), ZLossParams(a, b))
        asym = max(asym, abs(value - (b - z_c)))
    rows.append((f"asymptote gap {asym:.1e} < 1e-6", asym < 1e-6))
    check(5, rows)


# --------------------------------------------------------------------------
# 6. metric correctness
# --------------------------------------------------------------------------


def test_c6_metric_correctness():
    rng = np.random.default_rng(6)
    S = rng.integers(-5, 6, size=(10_000, 20)).astype(float) / 2  # plenty of ties
    t = rng.integers(0, 20, size=10_000)
    brute = np.empty(10_000, dtype=np.int64)
    idx = np.arange(20)
    for i in range(10_000):
        order = np.lexsort((idx, -S[i]))
        brute[i] = int(np.flatnonzero(order == t[i])[0]) + 1
    got = aggregate(ranks_batch(S, t), DEFAULT_KSET)
    ref_topk = {k: float(np.mean(brute > k)) for k in DEFAULT_KSET}
    ref_mrr = float(np.sum(1.0 / brute) / brute.size)
    same = got.topk == ref_topk and got.mrr == ref_mrr
    ones = aggregate(np.ones(1000, dtype=int), DEFAULT_KSET)
    errs = [got.topk[k] for k in DEFAULT_KSET]
    check(6, [("aggregate equals brute-force full sort", same),
              (f"all-rank-1 MRR {ones.mrr}", ones.mrr == 1.0),
              ("error(k) non-increasing", all(a >= b for a, b in zip(errs, errs[1:])))])


# --------------------------------------------------------------------------
# 7. end-to-end learning
# --------------------------------------------------------------------------


def _toy():
    rng = np.random.default_rng(0)
    V = 16
    pairs = np.array([(i, j) for i in range(V) for j in range(V)])
    idx = rng.choice(len(pairs), 64, replace=False)
    return V, NgramDataset(pairs[idx], rng.integers(0, V, 64))


def _toy_run(V, data, head, loss, a, b, eta, epochs, batch, eval_every=0):
    model = NgramModel(ModelConfig(vocab_size=V, context_len=2, emb_dim=16, hidden_sizes=(64,),
                                   head=head, loss=loss, a=a, b=b, seed=1))
    cfg = TrainConfig(eta0=eta, batch_size=batch, max_epochs=epochs, eval_every=eval_every,
                      k_set=(1, 5), plateau_patience=10**9)
    return train(model, data, data, cfg)


def test_c7_end_to_end_learning():
    V, data = _toy()
    dense = _toy_run(V, data, "dense", "logsoftmax", 1.0, 0.0, 0.5, 500, 8, eval_every=640)
    fact = _toy_run(V, data, "factored", "zloss", 1.0, 3.0, 0.1, 500, 8, eval_every=640)
    d_err = dense.records[-1]["valid"]["topk"]["1"]
    f_err = fact.records[-1]["valid"]["topk"]["1"]
    rows = [(f"dense+logsoftmax top-1 error {d_err}", d_err == 0.0),
            (f"factored+zloss top-1 error {f_err}", f_err == 0.0)]
    for loss in ("zloss", "mse", "taylor"):
        logs = [_toy_run(V, data, head, loss, 1.0, 3.0, 0.05, 20, 1) for head in
                ("dense", "factored")]
        gap = 0.0
        for rd, rf in zip(logs[0].records, logs[1].records):
            gap = max(gap, abs(rd["valid"]["mrr"] - rf["valid"]["mrr"]),
                      *(abs(rd["valid"]["topk"][k] - rf["valid"]["topk"][k])
                        for k in rd["valid"]["topk"]))
        rows.append((f"{loss} batch-1 head swap metric gap {gap:.1e} <= 1e-6", gap <= 1e-6))
    check(7, rows)


# --------------------------------------------------------------------------
# 8. trend check (optional, slow)
# --------------------------------------------------------------------------


TREND = dict(n_tokens=400_000, vocab=2000, context=4, emb=32, hidden=128, epochs=8, eta=1.0,
             seeds=(0, 1, 2), a_values=(0.05, 0.4), b=28.0)


def trend_sweep(cfg=TREND):
    lines = synthetic_corpus(cfg["n_tokens"], vocab_size=cfg["vocab"], seed=7)
    cut = int(0.9 * len(lines))
    vocab = build_vocab(lines[:cut])
    n = cfg["context"] + 1
    train_data, valid_data = encode_ngrams(lines[:cut], vocab, n), encode_ngrams(lines[cut:], vocab, n)
    out = {}
    for a in cfg["a_values"]:
        top1, top50 = [], []
        for seed in cfg["seeds"]:
            model = NgramModel(ModelConfig(vocab_size=len(vocab), context_len=cfg["context"],
                                           emb_dim=cfg["emb"], hidden_sizes=(cfg["hidden"],),
                                           head="factored", loss="zloss", a=a, b=cfg["b"],
                                           seed=seed))
            log = train(model, train_data, valid_data,
                        TrainConfig(eta0=cfg["eta"], batch_size=250, max_epochs=cfg["epochs"],
                                    shuffle_seed=seed, k_set=(1, 50)))
            final = log.records[-1]["valid"]["topk"]
            top1.append(final["1"])
            top50.append(final["50"])
        out[a] = (float(np.mean(top1)), float(np.mean(top50)))
    return out


@pytest.mark.slow
@pytest.mark.skipif(not SLOW, reason="set ZLOSS_SLOW=1 to run the training sweep")
def test_c8_trend_check():
    res = trend_sweep()
    lo, hi = min(res), max(res)
    check(8, [(f"top-50 error a={hi}: {res[hi][1]:.4f} < a={lo}: {res[lo][1]:.4f}",
               res[hi][1] < res[lo][1]),
              (f"top-1 error a={lo}: {res[lo][0]:.4f} <= a={hi}: {res[hi][0]:.4f}",
               res[lo][0] <= res[hi][0])])


# --------------------------------------------------------------------------
# 9. baseline identities
# --------------------------------------------------------------------------


def test_c9_baseline_identities():
    rng = np.random.default_rng(9)
    flat_gap, norm_gap = 0.0, 0.0
    for _ in range(50):
        D, d = int(rng.integers(2, 60)), int(rng.integers(1, 8))
        head = HSMHead.init(rng.integers(1, 100, size=D), d, m=1, init_scale=1.0,
                            seed=int(rng.integers(1 << 30)))
        h = rng.normal(size=d)
        c = int(rng.integers(D))
        v, _ = head.step(h, c, 0.0)
        # one sorted cluster: word rows are in class order
        flat, _ = dense_eval("logsoftmax", head.W_word @ h, c)
        flat_gap = max(flat_gap, abs(v - flat))
        deep = HSMHead.init(rng.integers(1, 100, size=D), d, init_scale=2.0,
                            seed=int(rng.integers(1 << 30)))
        norm_gap = max(norm_gap, abs(deep.full_distribution(h).sum() - 1.0))
    freqs = rng.integers(0, 50, size=300)
    targets = rng.integers(0, 300, size=5000)
    rep = constant_baseline(freqs, targets, DEFAULT_KSET)
    order = sorted(range(300), key=lambda k: (-freqs[k], k))
    rank = {k: i + 1 for i, k in enumerate(order)}
    direct = aggregate([rank[int(c)] for c in targets], DEFAULT_KSET)
    check(9, [(f"hsm m=1 vs flat softmax {flat_gap:.1e} <= 1e-10", flat_gap <= 1e-10),
              (f"hsm distribution sum gap {norm_gap:.1e} <= 1e-9", norm_gap <= 1e-9),
              ("constant baseline equals direct recomputation", rep == direct)])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
