"""Per-example inner loops: factored rank-1 updates, two-level softmax steps, rank scans.

``factored_apply`` reports through ``status``: ``(0, n)`` all ``n`` examples
applied; ``(1, i)`` example ``i`` would make ``U`` singular and nothing from it
on was applied; ``(2, i)`` the first ``i`` examples were applied and the
Frobenius condition estimate ``|U|_F |U^-1|_F / d`` (tracked incrementally in
``norms`` as squared norms) passed ``cond_limit``.

Every kernel exists twice: a loop version (``*_loops``, compiled by numba when
available) and a vectorized numpy version (``*_numpy``). The unprefixed name is
bound to whichever backend :mod:`zloss._backend` selected. Both variants mutate
their array arguments in place and must agree to rounding error.
"""

from __future__ import annotations

import numpy as np

from ._backend import USE_NUMBA, njit

SM_GUARD = 1e-8


# --------------------------------------------------------------------------
# factored output layer: sequential exact SGD steps
# --------------------------------------------------------------------------


def _factored_apply_loops(U, U_inv, G, v_bar, V_store, omega, H, targets,
                          alphas, betas, gammas, eta, n_rows, norms, cond_limit, status):
    d = U.shape[0]
    limit_sq = (cond_limit * d) ** 2
    uh = np.empty(d)
    hu = np.empty(d)
    delta = np.empty(d)
    vc = np.empty(d)
    vb = np.empty(d)
    dw = np.empty(d)
    for i in range(H.shape[0]):
        h = H[i]
        c = targets[i]
        kappa = 2.0 * eta * betas[i]
        hh = 0.0
        for j in range(d):
            hh += h[j] * h[j]
        denom = 1.0 - kappa * hh
        if abs(denom) <= SM_GUARD:
            status[0] = 1
            status[1] = i
            return

        # U <- U (I - kappa h h^T)
        uh_sq = 0.0
        for r in range(d):
            acc = 0.0
            for j in range(d):
                acc += U[r, j] * h[j]
            uh[r] = acc
            uh_sq += acc * acc
        for r in range(d):
            f = kappa * uh[r]
            for j in range(d):
                U[r, j] -= f * h[j]

        # U_inv <- (I + kappa/denom h h^T) U_inv
        for j in range(d):
            hu[j] = 0.0
        for r in range(d):
            hr = h[r]
            for j in range(d):
                hu[j] += hr * U_inv[r, j]
        coef = kappa / denom
        for r in range(d):
            f = coef * h[r]
            for j in range(d):
                U_inv[r, j] += f * hu[j]
        hu_sq = 0.0
        for j in range(d):
            hu_sq += hu[j] * hu[j]
        # squared Frobenius norms after the two rank-1 changes
        norms[0] += (kappa * kappa * hh - 2.0 * kappa) * uh_sq
        norms[1] += (2.0 * coef + coef * coef * hh) * hu_sq

        # u = U_inv_new^T h = hu / denom
        eg = eta * gammas[i] / denom
        ea = eta * alphas[i] / denom
        for j in range(d):
            delta[j] = -eg * hu[j]
            vc[j] = V_store[c, j] + omega[j]
            vb[j] = v_bar[j] + delta[j]
            dw[j] = -ea * hu[j]
        for r in range(d):
            for j in range(d):
                G[r, j] += ((vc[r] * delta[j] + delta[r] * vc[j])
                            + delta[r] * delta[j]
                            + (vb[r] * dw[j] + dw[r] * vb[j])
                            + n_rows * dw[r] * dw[j])
        for j in range(d):
            V_store[c, j] += delta[j]
            v_bar[j] = vb[j] + n_rows * dw[j]
            omega[j] += dw[j]
        if norms[0] * norms[1] > limit_sq:
            status[0] = 2
            status[1] = i + 1
            return
    status[0] = 0
    status[1] = H.shape[0]


def _factored_apply_numpy(U, U_inv, G, v_bar, V_store, omega, H, targets,
                          alphas, betas, gammas, eta, n_rows, norms, cond_limit, status):
    limit_sq = (cond_limit * U.shape[0]) ** 2
    for i in range(H.shape[0]):
        h = H[i]
        c = targets[i]
        kappa = 2.0 * eta * betas[i]
        hh = h @ h
        denom = 1.0 - kappa * hh
        if abs(denom) <= SM_GUARD:
            status[:] = (1, i)
            return
        uh = U @ h
        U -= np.outer(kappa * uh, h)
        hu = h @ U_inv
        coef = kappa / denom
        U_inv += np.outer(coef * h, hu)
        norms[0] += (kappa * kappa * hh - 2.0 * kappa) * (uh @ uh)
        norms[1] += (2.0 * coef + coef * coef * hh) * (hu @ hu)
        delta = (-eta * gammas[i] / denom) * hu
        dw = (-eta * alphas[i] / denom) * hu
        vc = V_store[c] + omega
        vb = v_bar + delta
        G += ((np.outer(vc, delta) + np.outer(delta, vc))
              + np.outer(delta, delta)
              + (np.outer(vb, dw) + np.outer(dw, vb))
              + n_rows * np.outer(dw, dw))
        V_store[c] += delta
        v_bar[:] = vb + n_rows * dw
        omega += dw
        if norms[0] * norms[1] > limit_sq:
            status[:] = (2, i + 1)
            return
    status[:] = (0, H.shape[0])


factored_apply_numba = njit(_factored_apply_loops)
factored_apply_numpy = _factored_apply_numpy


# --------------------------------------------------------------------------
# two-level hierarchical softmax: loss, input gradient and SGD step
# --------------------------------------------------------------------------


def _hsm_batch_loops(W_cluster, W_word, offsets, cluster_of, row_of, H, targets,
                     eta, values, grad_h):
    K = H.shape[0]
    m, d = W_cluster.shape
    max_n = 0
    for j in range(m):
        n = offsets[j + 1] - offsets[j]
        if n > max_n:
            max_n = n
    gc = np.empty((K, m))
    gw = np.empty((K, max_n))
    for i in range(K):
        h = H[i]
        c = targets[i]
        j = cluster_of[c]
        lo = offsets[j]
        n = offsets[j + 1] - lo
        pos = row_of[c] - lo

        mx = -np.inf
        for k in range(m):
            acc = 0.0
            for t in range(d):
                acc += W_cluster[k, t] * h[t]
            gc[i, k] = acc
            if acc > mx:
                mx = acc
        tot = 0.0
        for k in range(m):
            tot += np.exp(gc[i, k] - mx)
        lse_c = mx + np.log(tot)
        val = lse_c - gc[i, j]
        for k in range(m):
            gc[i, k] = np.exp(gc[i, k] - lse_c)
        gc[i, j] -= 1.0

        mx = -np.inf
        for k in range(n):
            acc = 0.0
            for t in range(d):
                acc += W_word[lo + k, t] * h[t]
            gw[i, k] = acc
            if acc > mx:
                mx = acc
        tot = 0.0
        for k in range(n):
            tot += np.exp(gw[i, k] - mx)
        lse_w = mx + np.log(tot)
        val += lse_w - gw[i, pos]
        for k in range(n):
            gw[i, k] = np.exp(gw[i, k] - lse_w)
        gw[i, pos] -= 1.0
        values[i] = val

        for t in range(d):
            grad_h[i, t] = 0.0
        for k in range(m):
            g = gc[i, k]
            for t in range(d):
                grad_h[i, t] += g * W_cluster[k, t]
        for k in range(n):
            g = gw[i, k]
            for t in range(d):
                grad_h[i, t] += g * W_word[lo + k, t]

    if eta == 0.0:
        return
    for i in range(K):
        h = H[i]
        j = cluster_of[targets[i]]
        lo = offsets[j]
        n = offsets[j + 1] - lo
        for k in range(m):
            g = eta * gc[i, k]
            for t in range(d):
                W_cluster[k, t] -= g * h[t]
        for k in range(n):
            g = eta * gw[i, k]
            for t in range(d):
                W_word[lo + k, t] -= g * h[t]


def _log_softmax_rows(x):
    mx = x.max(axis=-1, keepdims=True)
    return x - (mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True)))


def _hsm_batch_numpy(W_cluster, W_word, offsets, cluster_of, row_of, H, targets,
                     eta, values, grad_h):
    clusters = cluster_of[targets]
    lc = _log_softmax_rows(H @ W_cluster.T)
    K = H.shape[0]
    rows = np.arange(K)
    values[:] = -lc[rows, clusters]
    gc = np.exp(lc)
    gc[rows, clusters] -= 1.0
    grad_h[:] = gc @ W_cluster
    word_grads = []
    for j in np.unique(clusters):
        idx = np.flatnonzero(clusters == j)
        lo, hi = offsets[j], offsets[j + 1]
        Wj = W_word[lo:hi]
        lw = _log_softmax_rows(H[idx] @ Wj.T)
        pos = row_of[targets[idx]] - lo
        values[idx] -= lw[np.arange(len(idx)), pos]
        gw = np.exp(lw)
        gw[np.arange(len(idx)), pos] -= 1.0
        grad_h[idx] += gw @ Wj
        word_grads.append((idx, lo, hi, gw))
    if eta == 0.0:
        return
    W_cluster -= eta * (gc.T @ H)
    for idx, lo, hi, gw in word_grads:
        W_word[lo:hi] -= eta * (gw.T @ H[idx])


hsm_batch_numba = njit(_hsm_batch_loops)
hsm_batch_numpy = _hsm_batch_numpy


# --------------------------------------------------------------------------
# ranks with deterministic index tie-break
# --------------------------------------------------------------------------


def _ranks_loops(scores, targets, out):
    K, D = scores.shape
    for i in range(K):
        c = targets[i]
        sc = scores[i, c]
        if sc != sc:
            return i
        r = 1
        for k in range(D):
            s = scores[i, k]
            if s != s:
                return i
            if s > sc or (s == sc and k < c):
                r += 1
        out[i] = r
    return -1


def _ranks_numpy(scores, targets, out):
    bad = np.isnan(scores).any(axis=1)
    if bad.any():
        return int(np.flatnonzero(bad)[0])
    rows = np.arange(scores.shape[0])
    sc = scores[rows, targets][:, None]
    before = np.arange(scores.shape[1])[None, :] < targets[:, None]
    out[:] = 1 + (scores > sc).sum(axis=1) + ((scores == sc) & before).sum(axis=1)
    return -1


ranks_numba = njit(_ranks_loops)
ranks_numpy = _ranks_numpy


if USE_NUMBA:
    factored_apply = factored_apply_numba
    hsm_batch = hsm_batch_numba
    ranks_into = ranks_numba
else:
    factored_apply = factored_apply_numpy
    hsm_batch = hsm_batch_numpy
    ranks_into = ranks_numpy

BACKENDS = {
    "numba": {"factored_apply": factored_apply_numba, "hsm_batch": hsm_batch_numba,
              "ranks_into": ranks_numba},
    "numpy": {"factored_apply": factored_apply_numpy, "hsm_batch": hsm_batch_numpy,
              "ranks_into": ranks_numpy},
}
