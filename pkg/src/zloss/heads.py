"""Output heads with a shared minibatch interface.

Every head implements ``step_batch(H, targets, eta)``: losses and input
gradients are computed against the weights as they are on entry, then each
example's weight step (scaled by ``eta``) is applied. Callers wanting a
minibatch-averaged step pass ``eta / K``.
"""

from __future__ import annotations

import logging
import math
from typing import NamedTuple

import numpy as np

from . import kernels
from .factored import FactoredLayer, uniform_init
from .losses import (LossConfigError, SphericalGrad, ZLossParams, canonical_kind,
                     dense_eval_batch, is_spherical, spherical_terms)

log = logging.getLogger(__name__)

HEAD_KINDS = ("dense", "factored", "hsm")


class StepResult(NamedTuple):
    values: np.ndarray
    input_grads: np.ndarray
    skipped: int


def _loss_params(kind, params):
    if kind == "zloss" and params is None:
        raise LossConfigError("zloss requires ZLossParams(a, b)")
    return params


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------


class DenseHead:
    """Plain ``o = W h`` with any loss; O(D d) per example."""

    def __init__(self, W, loss: str = "logsoftmax", params: ZLossParams | None = None):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.loss = canonical_kind(loss)
        self.params = _loss_params(self.loss, params)

    @classmethod
    def init(cls, D, d, loss="logsoftmax", params=None, init_scale=0.1, seed=None):
        return cls(uniform_init(D, d, init_scale, seed), loss, params)

    @property
    def D(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def step(self, h, c: int, eta: float):
        """One example: returns ``(loss, dL/dh)``, both taken before the update."""
        res = self.step_batch(np.asarray(h, dtype=np.float64)[None, :], np.array([c]), eta)
        return float(res.values[0]), res.input_grads[0]

    def step_batch(self, H, targets, eta: float) -> StepResult:
        H = np.asarray(H, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.int64)
        res = dense_eval_batch(self.loss, H @ self.W.T, targets, self.params)
        grads = res.grads
        if res.degenerate.any():
            grads[res.degenerate] = 0.0
        input_grads = grads @ self.W
        if eta != 0.0:
            self.W -= (eta * grads).T @ H
        return StepResult(res.values, input_grads, int(res.degenerate.sum()))

    def scores_batch(self, H):
        return np.asarray(H, dtype=np.float64) @ self.W.T

    def state_arrays(self):
        return {"W": self.W}

    def config(self):
        return {"D": self.D, "d": self.d}

    @classmethod
    def from_state(cls, arrays, config, loss, params):
        return cls(arrays["W"], loss, params)


# --------------------------------------------------------------------------
# factored (spherical losses only)
# --------------------------------------------------------------------------


class FactoredHead:
    """Spherical loss on top of :class:`FactoredLayer`; O(d^2) per example."""

    def __init__(self, layer: FactoredLayer, loss: str = "zloss",
                 params: ZLossParams | None = None):
        loss = canonical_kind(loss)
        if not is_spherical(loss):
            raise LossConfigError(
                f"loss {loss!r} is not spherical and cannot train a factored output layer")
        self.layer = layer
        self.loss = loss
        self.params = _loss_params(loss, params)

    @classmethod
    def init(cls, D, d, loss="zloss", params=None, init_scale=0.1, seed=None, **layer_kw):
        return cls(FactoredLayer.init(D, d, init_scale, seed, **layer_kw), loss, params)

    @property
    def D(self):
        return self.layer.D

    @property
    def d(self):
        return self.layer.d

    def step(self, h, c: int, eta: float):
        res = self.step_batch(np.asarray(h, dtype=np.float64)[None, :], np.array([c]), eta)
        return float(res.values[0]), res.input_grads[0]

    def step_batch(self, H, targets, eta: float) -> StepResult:
        layer = self.layer
        cache = layer.forward_batch(H, targets)
        values, alpha, beta, gamma, degen = spherical_terms(
            self.loss, cache.q, cache.s_sq, cache.o_c, layer.D, self.params)
        ok = ~degen
        alpha, beta, gamma = (np.where(ok, x, 0.0) for x in (alpha, beta, gamma))
        input_grads = layer.input_grad_batch(cache, alpha, beta, gamma)
        if eta != 0.0:
            layer.apply_batch(cache, alpha, beta, gamma, eta, mask=ok if degen.any() else None)
        return StepResult(values, input_grads, int(degen.sum()))

    def spherical_grad(self, stats) -> SphericalGrad:
        value, a, b, g, degen = spherical_terms(self.loss, stats.q, stats.s_sq, stats.o_c,
                                                stats.dim, self.params)
        return SphericalGrad(float(a), float(b), float(g), bool(degen))

    def scores_batch(self, H):
        return self.layer.full_scores_batch(H)

    def state_arrays(self):
        return self.layer.state_arrays()

    def config(self):
        return self.layer.config()

    @classmethod
    def from_state(cls, arrays, config, loss, params):
        return cls(FactoredLayer.from_state(arrays, config), loss, params)


# --------------------------------------------------------------------------
# two-level hierarchical softmax
# --------------------------------------------------------------------------


def build_frequency_clusters(freqs, m: int) -> list[np.ndarray]:
    """Sort classes by descending frequency (ties: lower index first) and cut into
    ``m`` contiguous groups whose sizes differ by at most one."""
    freqs = np.asarray(freqs)
    D = freqs.shape[0]
    if not 1 <= m <= D:
        raise ValueError(f"need 1 <= m <= D, got m={m}, D={D}")
    order = np.lexsort((np.arange(D), -freqs.astype(np.float64)))
    return [np.sort(g) for g in np.array_split(order, m)]


def default_n_clusters(D: int) -> int:
    return math.isqrt(D - 1) + 1 if D > 1 else 1


class HSMHead:
    """Cluster softmax followed by a softmax over the target's cluster members."""

    loss = "hsm"
    params = None

    def __init__(self, clusters, W_cluster, W_word):
        members = [np.asarray(g, dtype=np.int64) for g in clusters]
        D = sum(len(g) for g in members)
        flat = np.concatenate(members)
        if len(np.unique(flat)) != D or flat.min() != 0 or flat.max() != D - 1:
            raise ValueError("clusters must partition range(D)")
        self.members = members
        self.offsets = np.zeros(len(members) + 1, dtype=np.int64)
        self.offsets[1:] = np.cumsum([len(g) for g in members])
        self.cluster_of = np.empty(D, dtype=np.int64)
        self.row_of = np.empty(D, dtype=np.int64)
        for j, g in enumerate(members):
            self.cluster_of[g] = j
            self.row_of[g] = self.offsets[j] + np.arange(len(g))
        self.W_cluster = np.ascontiguousarray(W_cluster, dtype=np.float64)
        self.W_word = np.ascontiguousarray(W_word, dtype=np.float64)
        if self.W_cluster.shape[0] != len(members) or self.W_word.shape[0] != D:
            raise ValueError("weight shapes do not match the cluster layout")

    @classmethod
    def init(cls, freqs, d, m=None, init_scale=0.1, seed=None):
        D = len(freqs)
        m = default_n_clusters(D) if m is None else m
        clusters = build_frequency_clusters(freqs, m)
        rng = np.random.default_rng(seed)
        W_cluster = rng.uniform(-init_scale, init_scale, size=(m, d))
        W_word = rng.uniform(-init_scale, init_scale, size=(D, d))
        return cls(clusters, W_cluster, W_word)

    @property
    def D(self):
        return self.W_word.shape[0]

    @property
    def d(self):
        return self.W_word.shape[1]

    @property
    def n_clusters(self):
        return len(self.members)

    def word_rows(self, j: int) -> np.ndarray:
        """Weights of cluster ``j``'s members, in the order of ``members[j]``."""
        return self.W_word[self.offsets[j]:self.offsets[j + 1]]

    def step(self, h, c: int, eta: float):
        res = self.step_batch(np.asarray(h, dtype=np.float64)[None, :], np.array([c]), eta)
        return float(res.values[0]), res.input_grads[0]

    def step_batch(self, H, targets, eta: float) -> StepResult:
        H = np.ascontiguousarray(H, dtype=np.float64)
        targets = np.ascontiguousarray(targets, dtype=np.int64)
        values = np.empty(H.shape[0])
        grads = np.empty_like(H)
        kernels.hsm_batch(self.W_cluster, self.W_word, self.offsets, self.cluster_of,
                          self.row_of, H, targets, float(eta), values, grads)
        return StepResult(values, grads, 0)

    def log_distribution_batch(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=np.float64)
        lc = kernels._log_softmax_rows(H @ self.W_cluster.T)
        out = np.empty((H.shape[0], self.D))
        for j, g in enumerate(self.members):
            lw = kernels._log_softmax_rows(H @ self.word_rows(j).T)
            out[:, g] = lc[:, j:j + 1] + lw
        return out

    def full_distribution(self, h) -> np.ndarray:
        return np.exp(self.log_distribution_batch(np.asarray(h)[None, :])[0])

    def scores_batch(self, H):
        return self.log_distribution_batch(H)

    def state_arrays(self):
        sizes = np.array([len(g) for g in self.members], dtype=np.int64)
        return {"W_cluster": self.W_cluster, "W_word": self.W_word,
                "cluster_members": np.concatenate(self.members), "cluster_sizes": sizes}

    def config(self):
        return {"D": self.D, "d": self.d, "n_clusters": self.n_clusters}

    @classmethod
    def from_state(cls, arrays, config, loss=None, params=None):
        sizes = arrays["cluster_sizes"]
        clusters = np.split(arrays["cluster_members"], np.cumsum(sizes)[:-1])
        return cls(clusters, arrays["W_cluster"], arrays["W_word"])


def make_head(kind: str, D: int, d: int, loss: str, params=None, *, freqs=None,
              n_clusters=None, init_scale=0.1, seed=None, refactor_period=512):
    if kind == "dense":
        return DenseHead.init(D, d, loss, params, init_scale, seed)
    if kind == "factored":
        return FactoredHead.init(D, d, loss, params, init_scale, seed,
                                 refactor_period=refactor_period)
    if kind == "hsm":
        if canonical_kind(loss) != "logsoftmax":
            raise LossConfigError("the hierarchical softmax head trains its own log-softmax; "
                                  f"loss {loss!r} is not supported with it")
        freqs = np.ones(D) if freqs is None else freqs
        return HSMHead.init(freqs, d, n_clusters, init_scale, seed)
    raise LossConfigError(f"unknown head {kind!r}; expected one of {HEAD_KINDS}")


HEAD_CLASSES = {"dense": DenseHead, "factored": FactoredHead, "hsm": HSMHead}
