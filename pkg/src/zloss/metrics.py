"""Top-k error rates and mean reciprocal rank.

The rank of the target is ``1 + #{strictly higher scores} + #{equal scores at a
smaller class index}``, so evaluation never needs a random tie-break.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_KSET = (1, 5, 10, 20, 50, 100)


class DataError(ValueError):
    """Malformed or empty evaluation input."""


def rank_of_target(scores, c: int) -> int:
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= c < scores.shape[0]:
        raise IndexError(f"target {c} out of range for D={scores.shape[0]}")
    return int(ranks_batch(scores[None, :], np.array([c]))[0])


def ranks_batch(scores, targets) -> np.ndarray:
    """Ranks for each row of a ``(K, D)`` score matrix (one O(D) scan per row)."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    out = np.empty(scores.shape[0], dtype=np.int64)
    bad = kernels.ranks_into(scores, targets, out)
    if bad >= 0:
        raise DataError(f"NaN in scores of example {bad}")
    return out


@dataclass
class RankAccumulator:
    """Mergeable partial sums for top-k errors and MRR."""

    k_set: tuple[int, ...]
    n: int = 0
    misses: dict = field(default_factory=dict)
    recip_sum: float = 0.0

    def __post_init__(self):
        self.k_set = tuple(sorted(set(int(k) for k in self.k_set)))
        if not self.k_set or self.k_set[0] < 1:
            raise ValueError("k_set must be a non-empty set of positive integers")
        for k in self.k_set:
            self.misses.setdefault(k, 0)

    def add(self, ranks) -> None:
        ranks = np.asarray(ranks, dtype=np.int64)
        if ranks.size and ranks.min() < 1:
            raise DataError("ranks must be >= 1")
        self.n += int(ranks.size)
        for k in self.k_set:
            self.misses[k] += int((ranks > k).sum())
        self.recip_sum += float((1.0 / ranks).sum())

    def merge(self, other: "RankAccumulator") -> "RankAccumulator":
        if other.k_set != self.k_set:
            raise ValueError("cannot merge accumulators with different k sets")
        self.n += other.n
        for k in self.k_set:
            self.misses[k] += other.misses[k]
        self.recip_sum += other.recip_sum
        return self

    def report(self) -> "MetricsReport":
        if self.n == 0:
            raise DataError("no examples to aggregate")
        return MetricsReport({k: self.misses[k] / self.n for k in self.k_set},
                             self.recip_sum / self.n, self.n)


@dataclass(frozen=True)
class MetricsReport:
    topk: dict
    mrr: float
    n: int

    def error(self, k: int) -> float:
        return self.topk[k]

    def to_dict(self) -> dict:
        return {"n": self.n, "mrr": self.mrr, "topk": {str(k): v for k, v in self.topk.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls({int(k): float(v) for k, v in data["topk"].items()},
                   float(data["mrr"]), int(data["n"]))

    def __str__(self):
        parts = [f"top{k}={100 * v:.2f}%" for k, v in self.topk.items()]
        return f"n={self.n} " + " ".join(parts) + f" mrr={self.mrr:.4f}"


def aggregate(ranks, k_set=DEFAULT_KSET) -> MetricsReport:
    acc = RankAccumulator(tuple(k_set))
    acc.add(np.fromiter(ranks, dtype=np.int64) if not hasattr(ranks, "__len__") else ranks)
    return acc.report()


def constant_baseline(freqs, eval_targets, k_set=DEFAULT_KSET) -> MetricsReport:
    """Metrics of a classifier that scores every example with the training frequencies."""
    freqs = np.asarray(freqs, dtype=np.float64)
    targets = np.asarray(eval_targets, dtype=np.int64)
    if targets.size == 0:
        raise DataError("no evaluation targets")
    # one scan gives every class's rank under the fixed score vector
    order = np.lexsort((np.arange(freqs.shape[0]), -freqs))
    rank_of = np.empty(freqs.shape[0], dtype=np.int64)
    rank_of[order] = np.arange(1, freqs.shape[0] + 1)
    return aggregate(rank_of[targets], k_set)
