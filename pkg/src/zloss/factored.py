"""Output layer whose exact SGD step costs O(d^2) per example, independent of D.

The logical ``D x d`` weight matrix is never stored. It is represented as::

    W = (V_store + 1 omega^T) U

alongside ``U^{-1}``, ``v_bar = V_eff^T 1`` and ``G = V_eff^T V_eff`` where
``V_eff = V_store + 1 omega^T``. For a spherical loss the output gradient is
``alpha 1 + 2 beta o + gamma e_c``; the ``o`` term becomes a multiplicative
rank-1 change of ``U`` (inverse kept with Sherman-Morrison), the ``e_c`` term a
change of one stored row, and the ``1`` term a change of the shared offset
``omega``. None of these touch more than one of the ``D`` rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .losses import SphericalGrad, SphericalStats

log = logging.getLogger(__name__)


class SingularUpdate(ArithmeticError):
    """The multiplicative factor ``I - kappa h h^T`` is (numerically) singular."""


class StaleCache(RuntimeError):
    """A forward cache was used after the layer it came from was modified."""


@dataclass
class ForwardCache:
    h: np.ndarray
    h_hat: np.ndarray
    stats: SphericalStats
    target: int
    v_c_eff: np.ndarray
    version: int


@dataclass
class BatchCache:
    H: np.ndarray
    H_hat: np.ndarray
    targets: np.ndarray
    q: np.ndarray
    s_sq: np.ndarray
    o_c: np.ndarray
    V_c: np.ndarray
    version: int


class FactoredLayer:
    def __init__(self, V_store, omega=None, U=None, U_inv=None, *,
                 refactor_period: int = 512, cond_limit: float = 1e6):
        V_store = np.ascontiguousarray(V_store)
        if V_store.dtype not in (np.float32, np.float64):
            V_store = V_store.astype(np.float64)
        D, d = V_store.shape
        if D < 2 or d < 1:
            raise ValueError(f"need D >= 2 and d >= 1, got D={D}, d={d}")
        self.V_store = V_store
        self.omega = np.zeros(d) if omega is None else np.array(omega, dtype=np.float64)
        self.U = np.eye(d) if U is None else np.array(U, dtype=np.float64)
        self.U_inv = np.eye(d) if U_inv is None else np.array(U_inv, dtype=np.float64)
        self.refactor_period = int(refactor_period)
        self.cond_limit = float(cond_limit)
        self.step_count = 0
        self.refactor_count = 0
        self._since_refactor = 0
        self._version = 0
        self.v_bar, self.G = self._recompute_summaries()

    @classmethod
    def init(cls, D: int, d: int, init_scale: float = 0.1, seed=None,
             dtype=np.float64, **kwargs) -> "FactoredLayer":
        if not init_scale > 0:
            raise ValueError("init_scale must be positive")
        return cls(uniform_init(D, d, init_scale, seed).astype(dtype, copy=False), **kwargs)

    @property
    def D(self) -> int:
        return self.V_store.shape[0]

    @property
    def d(self) -> int:
        return self.V_store.shape[1]

    def _recompute_summaries(self):
        V = self.V_store.astype(np.float64) + self.omega
        G = V.T @ V
        return V.sum(axis=0), 0.5 * (G + G.T)

    def _touch(self):
        self._version += 1

    # ------------------------------------------------------------------
    # per-example API
    # ------------------------------------------------------------------

    def forward(self, h, c: int) -> ForwardCache:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.d,):
            raise ValueError(f"h must have shape ({self.d},), got {h.shape}")
        if not 0 <= c < self.D:
            raise IndexError(f"target {c} out of range for D={self.D}")
        h_hat = self.U @ h
        v_c = self.V_store[c] + self.omega
        stats = SphericalStats(float(self.v_bar @ h_hat), float(h_hat @ self.G @ h_hat),
                               float(v_c @ h_hat), self.D, int(c))
        return ForwardCache(h.copy(), h_hat, stats, int(c), v_c, self._version)

    def input_grad(self, cache: ForwardCache, grad: SphericalGrad) -> np.ndarray:
        if cache.version != self._version:
            raise StaleCache("layer was updated after this forward pass")
        inner = (grad.alpha * self.v_bar + 2.0 * grad.beta * (self.G @ cache.h_hat)
                 + grad.gamma * cache.v_c_eff)
        return self.U.T @ inner

    def sgd_update(self, cache: ForwardCache, grad: SphericalGrad, eta: float,
                   strict: bool = True) -> None:
        """Exact step ``W <- W - eta (alpha 1 + 2 beta W h + gamma e_c) h^T``.

        With ``strict=False`` a cache from an earlier state is accepted; the
        ``W h`` term then uses the current weights.
        """
        if strict and cache.version != self._version:
            raise StaleCache("layer was updated after this forward pass")
        self._apply(cache.h[None, :], np.array([cache.target]), np.array([grad.alpha]),
                    np.array([grad.beta]), np.array([grad.gamma]), eta)

    # ------------------------------------------------------------------
    # batched API (used by the trainer)
    # ------------------------------------------------------------------

    def forward_batch(self, H, targets) -> BatchCache:
        H = np.ascontiguousarray(H, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.int64)
        H_hat = H @ self.U.T
        V_c = self.V_store[targets] + self.omega
        q = H_hat @ self.v_bar
        s_sq = np.einsum("ij,ij->i", H_hat @ self.G, H_hat)
        o_c = np.einsum("ij,ij->i", V_c, H_hat)
        return BatchCache(H, H_hat, targets, q, s_sq, o_c, V_c, self._version)

    def input_grad_batch(self, cache: BatchCache, alpha, beta, gamma) -> np.ndarray:
        if cache.version != self._version:
            raise StaleCache("layer was updated after this forward pass")
        inner = (np.outer(alpha, self.v_bar) + (2.0 * beta)[:, None] * (cache.H_hat @ self.G)
                 + gamma[:, None] * cache.V_c)
        return inner @ self.U

    def apply_batch(self, cache: BatchCache, alpha, beta, gamma, eta: float,
                    mask=None) -> None:
        """Apply per-example steps one after the other, each with step ``eta``."""
        H, targets = cache.H, cache.targets
        alpha, beta, gamma = (np.asarray(x, dtype=np.float64) for x in (alpha, beta, gamma))
        if mask is not None:
            H, targets = H[mask], targets[mask]
            alpha, beta, gamma = alpha[mask], beta[mask], gamma[mask]
        self._apply(H, targets, alpha, beta, gamma, eta)

    def _apply(self, H, targets, alpha, beta, gamma, eta):
        H = np.ascontiguousarray(H, dtype=np.float64)
        targets = np.ascontiguousarray(targets, dtype=np.int64)
        status = np.zeros(2, dtype=np.int64)
        start = 0
        n = H.shape[0]
        while start < n:
            stop = n
            if self.refactor_period > 0:
                stop = min(n, start + self.refactor_period - self._since_refactor)
            sl = slice(start, stop)
            # squared Frobenius norms, refreshed once per call and then tracked by the kernel
            norms = np.array([np.einsum("ij,ij->", self.U, self.U),
                              np.einsum("ij,ij->", self.U_inv, self.U_inv)])
            kernels.factored_apply(self.U, self.U_inv, self.G, self.v_bar, self.V_store,
                                   self.omega, H[sl], targets[sl], alpha[sl], beta[sl],
                                   gamma[sl], float(eta), float(self.D), norms,
                                   self.cond_limit, status)
            code, done = int(status[0]), int(status[1])
            self.step_count += done
            self._since_refactor += done
            if done:
                self._touch()
            if code == 1:
                h = H[start + done]
                raise SingularUpdate(
                    f"1 - kappa |h|^2 = {1 - 2 * eta * beta[start + done] * (h @ h):.3e} "
                    f"at step {self.step_count}; reduce the learning rate")
            start += done
            if code == 2:
                log.debug("refactorizing: condition estimate %.3g > %.3g",
                          np.sqrt(norms[0] * norms[1]) / self.d, self.cond_limit)
                self.refactorize()
            elif self.refactor_period > 0 and self._since_refactor >= self.refactor_period:
                self.refactorize()

    # ------------------------------------------------------------------
    # evaluation and maintenance
    # ------------------------------------------------------------------

    def full_scores(self, h) -> np.ndarray:
        h_hat = self.U @ np.asarray(h, dtype=np.float64)
        return self.V_store @ h_hat + self.omega @ h_hat

    def full_scores_batch(self, H) -> np.ndarray:
        H_hat = np.asarray(H, dtype=np.float64) @ self.U.T
        return H_hat @ self.V_store.T + (H_hat @ self.omega)[:, None]

    def materialize(self) -> np.ndarray:
        return (self.V_store + self.omega) @ self.U

    def refactorize(self) -> None:
        W = self.materialize()
        self.V_store = np.ascontiguousarray(W.astype(self.V_store.dtype, copy=False))
        self.omega = np.zeros(self.d)
        self.U = np.eye(self.d)
        self.U_inv = np.eye(self.d)
        self.v_bar, self.G = self._recompute_summaries()
        self._since_refactor = 0
        self.refactor_count += 1
        self._touch()

    def cond_estimate(self) -> float:
        """``|U|_F |U^-1|_F / d``: 1 for the identity, within a factor ``d`` of cond_2(U)."""
        return float(np.linalg.norm(self.U) * np.linalg.norm(self.U_inv) / self.d)

    def integrity_check(self) -> dict:
        d = self.d
        uinv_drift = float(np.abs(self.U @ self.U_inv - np.eye(d)).max())
        v_bar, G = self._recompute_summaries()
        vbar_drift = float(np.abs(self.v_bar - v_bar).max() / max(np.abs(v_bar).max(), 1e-300))
        g_drift = float(np.abs(self.G - G).max() / max(np.abs(G).max(), 1e-300))
        return {"uinv_drift": uinv_drift, "vbar_drift": vbar_drift, "g_drift": g_drift,
                "cond_estimate": self.cond_estimate()}

    # ------------------------------------------------------------------
    # checkpointing
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict:
        """Weights for a checkpoint: the effective matrix, after refactorizing."""
        self.refactorize()
        return {"W": self.V_store.copy()}

    def config(self) -> dict:
        return {"D": self.D, "d": self.d, "refactor_period": self.refactor_period,
                "cond_limit": self.cond_limit, "dtype": self.V_store.dtype.name}

    @classmethod
    def from_state(cls, arrays: dict, config: dict) -> "FactoredLayer":
        W = np.asarray(arrays["W"], dtype=config.get("dtype", "float64"))
        if W.shape != (config["D"], config["d"]):
            raise ValueError(f"checkpoint W has shape {W.shape}, config says "
                             f"({config['D']}, {config['d']})")
        return cls(W, refactor_period=config.get("refactor_period", 512),
                   cond_limit=config.get("cond_limit", 1e6))


def uniform_init(D: int, d: int, init_scale: float, seed=None) -> np.ndarray:
    """Uniform ``[-init_scale, init_scale]`` weights shared by the dense and factored heads."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-init_scale, init_scale, size=(D, d))
