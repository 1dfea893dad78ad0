"""Classification losses over output pre-activations, with gradients.

Two groups live here. *Spherical* losses (``zloss``, ``mse``, ``taylor``) are
functions of the target score and the first two power sums of the output
vector only, so they can be evaluated from :class:`SphericalStats` without ever
forming the full output. *Dense-only* losses (``logsoftmax``, ``ce``, ``sz``)
need every output component.

All arithmetic is float64. Row-batched variants (``*_batch``) take an ``(K, D)``
array of outputs and a length-``K`` target vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SPHERICAL_KINDS = ("zloss", "mse", "taylor")
DENSE_ONLY_KINDS = ("logsoftmax", "ce", "sz")
ALL_KINDS = SPHERICAL_KINDS + DENSE_ONLY_KINDS
_ALIASES = {"ce_sigmoid": "ce", "log_softmax": "logsoftmax", "softmax": "logsoftmax"}

SIGMA_FLOOR = 1e-8


class LossConfigError(ValueError):
    """Unknown loss kind, missing parameters or an unsupported pairing."""


class DimensionError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in ALL_KINDS:
        raise LossConfigError(f"unknown loss kind {kind!r}; expected one of {ALL_KINDS}")
    return kind


def is_spherical(kind: str) -> bool:
    return canonical_kind(kind) in SPHERICAL_KINDS


@dataclass(frozen=True)
class ZLossParams:
    """Scale ``a`` (softness of the softplus) and shift ``b`` of the Z-loss."""

    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise LossConfigError(f"Z-loss scale a must be > 0, got {self.a}")


@dataclass(frozen=True)
class SphericalStats:
    q: float
    s_sq: float
    o_c: float
    dim: int
    target: int

    @classmethod
    def from_outputs(cls, o, c: int) -> "SphericalStats":
        o = np.asarray(o, dtype=np.float64)
        _check_vector(o, c)
        return cls(float(o.sum()), float(o @ o), float(o[c]), o.shape[0], int(c))


@dataclass(frozen=True)
class SphericalGrad:
    """Partials of a spherical loss w.r.t. (sum of outputs, sum of squares, target output)."""

    alpha: float
    beta: float
    gamma: float
    degenerate: bool = False


@dataclass(frozen=True)
class Standardized:
    z: np.ndarray
    mu: float
    sigma: float
    degenerate: bool


def _check_vector(o: np.ndarray, c: int | None = None) -> None:
    if o.ndim != 1:
        raise DimensionError(f"expected a 1-d output vector, got shape {o.shape}")
    if o.shape[0] < 2:
        raise DimensionError(f"need at least 2 output dimensions, got {o.shape[0]}")
    if c is not None and not 0 <= c < o.shape[0]:
        raise IndexError(f"target {c} out of range for D={o.shape[0]}")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# --------------------------------------------------------------------------
# Z-normalization
# --------------------------------------------------------------------------


def standardize(o, sigma_floor: float = SIGMA_FLOOR) -> Standardized:
    o = np.asarray(o, dtype=np.float64)
    _check_vector(o)
    if not sigma_floor > 0:
        raise ValueError("sigma_floor must be positive")
    mu = float(o.mean())
    centered = o - mu
    # second pass removes the rounding residue of the mean
    shift = centered.mean()
    mu += float(shift)
    centered -= shift
    sd = float(np.sqrt(centered @ centered / o.shape[0]))
    degenerate = sd < sigma_floor
    sigma = max(sd, sigma_floor)
    return Standardized(centered / sigma, mu, sigma, degenerate)


def standardize_rows(O, sigma_floor: float = SIGMA_FLOOR):
    """Row-wise Z-normalization; returns ``(Z, mu, sigma, degenerate)``."""
    O = np.asarray(O, dtype=np.float64)
    mu = O.mean(axis=1)
    centered = O - mu[:, None]
    shift = centered.mean(axis=1)
    mu = mu + shift
    centered -= shift[:, None]
    sd = np.sqrt(np.einsum("ij,ij->i", centered, centered) / O.shape[1])
    sigma = np.maximum(sd, sigma_floor)
    return centered / sigma[:, None], mu, sigma, sd < sigma_floor


# --------------------------------------------------------------------------
# spherical family, vectorized over arrays of statistics
# --------------------------------------------------------------------------


def spherical_terms(kind, q, s_sq, o_c, dim, params=None, sigma_floor=SIGMA_FLOOR):
    """Loss value and (alpha, beta, gamma) for arrays of statistics.

    Returns ``(value, alpha, beta, gamma, degenerate)`` with the broadcast shape
    of the inputs. ``degenerate`` is always False except for ``zloss`` rows whose
    standard deviation hit ``sigma_floor``.
    """
    kind = canonical_kind(kind)
    q = np.asarray(q, dtype=np.float64)
    s_sq = np.asarray(s_sq, dtype=np.float64)
    o_c = np.asarray(o_c, dtype=np.float64)
    D = float(dim)
    no_flag = np.zeros(np.broadcast(q, s_sq, o_c).shape, dtype=bool)

    if kind == "zloss":
        if params is None:
            raise LossConfigError("zloss requires ZLossParams(a, b)")
        a, b = params.a, params.b
        mu = q / D
        sd = np.sqrt(np.maximum(s_sq / D - mu * mu, 0.0))
        sigma = np.maximum(sd, sigma_floor)
        z_c = (o_c - mu) / sigma
        x = a * (b - z_c)
        value = softplus(x) / a
        g_z = -sigmoid(x)
        alpha = g_z / (D * sigma) * (z_c * mu / sigma - 1.0)
        beta = -g_z * z_c / (2.0 * D * sigma * sigma)
        gamma = g_z / sigma
        return value, alpha, beta, gamma, sd < sigma_floor

    if kind == "mse":
        value = 0.5 * (s_sq - 2.0 * o_c + 1.0)
        shape = value.shape
        return value, np.zeros(shape), np.full(shape, 0.5), np.full(shape, -1.0), no_flag

    if kind == "taylor":
        Z = D + q + 0.5 * s_sq
        n_c = 1.0 + o_c + 0.5 * o_c * o_c
        value = np.log(Z) - np.log(n_c)
        return value, 1.0 / Z, 0.5 / Z, -(1.0 + o_c) / n_c, no_flag

    raise LossConfigError(f"{kind!r} is not a spherical loss")


def spherical_eval(kind: str, stats: SphericalStats, params: ZLossParams | None = None,
                   sigma_floor: float = SIGMA_FLOOR) -> tuple[float, SphericalGrad]:
    if stats.dim < 2:
        raise DimensionError("need at least 2 output dimensions")
    value, alpha, beta, gamma, degenerate = spherical_terms(
        kind, stats.q, stats.s_sq, stats.o_c, stats.dim, params, sigma_floor)
    return float(value), SphericalGrad(float(alpha), float(beta), float(gamma), bool(degenerate))


def dense_grad_from_spherical(o, c: int, grad: SphericalGrad) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    _check_vector(o, c)
    g = grad.alpha + 2.0 * grad.beta * o
    g[c] += grad.gamma
    return g


# --------------------------------------------------------------------------
# dense evaluation
# --------------------------------------------------------------------------


class DenseResult(NamedTuple):
    values: np.ndarray
    grads: np.ndarray
    degenerate: np.ndarray


def dense_eval_batch(kind: str, O, targets, params: ZLossParams | None = None,
                     sigma_floor: float = SIGMA_FLOOR) -> DenseResult:
    """Loss values and full output gradients for each row of ``O``."""
    kind = canonical_kind(kind)
    O = np.asarray(O, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    K, D = O.shape
    if D < 2:
        raise DimensionError("need at least 2 output dimensions")
    rows = np.arange(K)
    no_flag = np.zeros(K, dtype=bool)

    if kind in SPHERICAL_KINDS:
        q = O.sum(axis=1)
        s_sq = np.einsum("ij,ij->i", O, O)
        o_c = O[rows, targets]
        value, alpha, beta, gamma, degen = spherical_terms(
            kind, q, s_sq, o_c, D, params, sigma_floor)
        grads = alpha[:, None] + 2.0 * beta[:, None] * O
        grads[rows, targets] += gamma
        return DenseResult(value, grads, degen)

    if kind == "logsoftmax":
        mx = O.max(axis=1, keepdims=True)
        e = np.exp(O - mx)
        tot = e.sum(axis=1, keepdims=True)
        value = (mx[:, 0] + np.log(tot[:, 0])) - O[rows, targets]
        grads = e / tot
        grads[rows, targets] -= 1.0
        return DenseResult(value, grads, no_flag)

    if kind == "ce":
        # softplus(-o_c) + sum_{k != c} softplus(o_k) == sum_k softplus(o_k) - o_c
        value = softplus(O).sum(axis=1) - O[rows, targets]
        grads = sigmoid(O)
        grads[rows, targets] -= 1.0
        return DenseResult(value, grads, no_flag)

    # sz: Z-normalized log-softmax with scale a; the shift is irrelevant
    a = 1.0 if params is None else params.a
    Z, _, sigma, degen = standardize_rows(O, sigma_floor)
    logits = a * Z
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    tot = e.sum(axis=1, keepdims=True)
    value = ((mx[:, 0] + np.log(tot[:, 0])) - logits[rows, targets]) / a
    u = e / tot
    u[rows, targets] -= 1.0
    uz = np.einsum("ij,ij->i", u, Z)
    grads = (u - Z * (uz / D)[:, None]) / sigma[:, None]
    return DenseResult(value, grads, degen)


def dense_eval(kind: str, o, c: int, params: ZLossParams | None = None,
               sigma_floor: float = SIGMA_FLOOR) -> tuple[float, np.ndarray]:
    o = np.asarray(o, dtype=np.float64)
    _check_vector(o, c)
    if canonical_kind(kind) in SPHERICAL_KINDS:
        stats = SphericalStats.from_outputs(o, c)
        value, grad = spherical_eval(kind, stats, params, sigma_floor)
        return value, dense_grad_from_spherical(o, c, grad)
    res = dense_eval_batch(kind, o[None, :], np.array([c]), params, sigma_floor)
    return float(res.values[0]), res.grads[0]


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------


class GradCheck(NamedTuple):
    max_rel_error: float
    status: str  # "ok" or "skipped-degenerate"


def reference_loss_rows(kind: str, P, c: int, params: ZLossParams | None = None,
                        dtype=np.longdouble) -> np.ndarray:
    """Loss of each row of ``P`` straight from the textbook definitions.

    Independent of the statistics/gradient code path and evaluated in ``dtype``
    (extended precision by default) so that central differences are limited by
    truncation rather than cancellation.
    """
    kind = canonical_kind(kind)
    P = np.asarray(P, dtype=dtype)
    D = P.shape[1]
    one = dtype(1)
    onehot = np.zeros(D, dtype=dtype)
    onehot[c] = one

    def _softplus(x):
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def _zscore(P):
        mu = P.mean(axis=1, keepdims=True)
        cen = P - mu
        return cen / np.sqrt((cen * cen).mean(axis=1, keepdims=True))

    if kind == "mse":
        diff = P - onehot
        return (diff * diff).sum(axis=1) / 2
    if kind == "taylor":
        n = one + P + P * P / 2
        return -np.log(n[:, c] / n.sum(axis=1))
    if kind == "logsoftmax":
        mx = P.max(axis=1, keepdims=True)
        return mx[:, 0] + np.log(np.exp(P - mx).sum(axis=1)) - P[:, c]
    if kind == "ce":
        terms = _softplus(P)
        terms[:, c] = _softplus(-P[:, c])
        return terms.sum(axis=1)
    if kind == "zloss":
        if params is None:
            raise LossConfigError("zloss requires ZLossParams(a, b)")
        a, b = dtype(params.a), dtype(params.b)
        return _softplus(a * (b - _zscore(P)[:, c])) / a
    a = dtype(1.0 if params is None else params.a)
    L = a * _zscore(P)
    mx = L.max(axis=1, keepdims=True)
    return (mx[:, 0] + np.log(np.exp(L - mx).sum(axis=1)) - L[:, c]) / a


def _mse_terms(x, c):
    diff = x.copy()
    diff[c] -= 1
    return diff * diff / 2


def _ce_terms(x, c):
    y = x.copy()
    y[c] = -y[c]
    return np.maximum(y, 0) + np.log1p(np.exp(-np.abs(y)))


_SEPARABLE = {"mse": _mse_terms, "ce": _ce_terms}


def grad_check(kind: str, o, c: int, params: ZLossParams | None = None,
               eps: float = 1e-5, sigma_floor: float = SIGMA_FLOOR,
               oracle_dtype=np.longdouble) -> GradCheck:
    """Compare the analytic gradient with central differences, coordinate by coordinate.

    The relative error of each coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-12)``. The analytic side is the float64
    production path; the finite-difference side evaluates
    :func:`reference_loss_rows` in ``oracle_dtype``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    o = np.array(o, dtype=np.float64)
    _check_vector(o, c)
    kind = canonical_kind(kind)
    if kind in ("zloss", "sz") and standardize(o).sigma < sigma_floor + 2 * eps:
        return GradCheck(float("nan"), "skipped-degenerate")
    _, analytic = dense_eval(kind, o, c, params, sigma_floor)
    D = o.shape[0]
    step = oracle_dtype(eps)
    if kind in _SEPARABLE:
        # only the k-th term of a coordinate-separable loss moves under e_k
        x = o.astype(oracle_dtype)
        t = _SEPARABLE[kind]
        numeric = (t(x + step, c) - t(x - step, c)) / (2 * step)
    else:
        P = np.repeat(o.astype(oracle_dtype)[None, :], 2 * D, axis=0)
        idx = np.arange(D)
        P[idx, idx] += step
        P[D + idx, idx] -= step
        vals = reference_loss_rows(kind, P, c, params, oracle_dtype)
        numeric = (vals[:D] - vals[D:]) / (2 * step)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return GradCheck(float(np.max(np.abs(analytic - numeric) / denom)), "ok")


GRAD_TOLERANCE = {"mse": 1e-9}
DEFAULT_GRAD_TOLERANCE = 1e-6
SWEEP_A = (0.1, 1.0, 10.0)
SWEEP_B = (0.0, 10.0, 28.0)


def grad_tolerance(kind: str) -> float:
    return GRAD_TOLERANCE.get(canonical_kind(kind), DEFAULT_GRAD_TOLERANCE)


def gradient_sweep(kinds=ALL_KINDS, dims=(5, 50, 1000), trials: int = 100, seed=0,
                   eps: float = 1e-5) -> dict:
    """Worst :func:`grad_check` error per ``(kind, D)`` over random Gaussian outputs.

    Losses with parameters draw ``a`` from ``SWEEP_A`` and ``b`` from ``SWEEP_B``
    per trial. Degenerate draws are skipped and counted.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for kind in kinds:
        kind = canonical_kind(kind)
        for D in dims:
            worst, skipped = 0.0, 0
            for _ in range(trials):
                o = rng.normal(size=D)
                c = int(rng.integers(D))
                params = None
                if kind in ("zloss", "sz"):
                    params = ZLossParams(float(rng.choice(SWEEP_A)), float(rng.choice(SWEEP_B)))
                res = grad_check(kind, o, c, params, eps)
                if res.status != "ok":
                    skipped += 1
                    continue
                worst = max(worst, res.max_rel_error)
            out[(kind, int(D))] = (worst, skipped)
    return out
