"""Feed-forward n-gram language model with a pluggable output head."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import NgramDataset, batch_stream
from .heads import HEAD_CLASSES, make_head
from .losses import ZLossParams, canonical_kind
from .metrics import DEFAULT_KSET, DataError, MetricsReport, RankAccumulator, ranks_batch

log = logging.getLogger(__name__)

EVAL_WORKERS_ENV = "ZLOSS_NUM_EVAL_WORKERS"


class ContractError(RuntimeError):
    """An API was called with state that no longer matches (e.g. a stale cache)."""


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int = 6
    emb_dim: int = 64
    hidden_sizes: tuple = (256,)
    activation: str = "tanh"
    head: str = "factored"
    loss: str = "zloss"
    a: float = 0.1
    b: float = 10.0
    seed: int = 0
    init_scale: float = 1.0
    output_bias: bool = False
    refactor_period: int = 512
    n_clusters: int | None = None

    def __post_init__(self):
        self.hidden_sizes = tuple(int(x) for x in self.hidden_sizes)
        self.loss = canonical_kind(self.loss)
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one positive hidden size")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden_sizes[-1] + int(self.output_bias)

    def loss_params(self) -> ZLossParams | None:
        return ZLossParams(self.a, self.b) if self.loss in ("zloss", "sz") else None


@dataclass
class TrainConfig:
    eta0: float = 0.1
    batch_size: int = 250
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    max_epochs: int = 10
    eval_every: int = 0  # examples; 0 = once per epoch
    metric_for_plateau: str = "top1"
    shuffle_seed: int | None = 0
    k_set: tuple = DEFAULT_KSET

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.metric_for_plateau not in ("top1", "top5", "mrr"):
            raise ValueError(f"unknown plateau metric {self.metric_for_plateau!r}")
        self.k_set = tuple(sorted(set(int(k) for k in self.k_set)))


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations without improvement."""

    def __init__(self, eta0, patience=2, factor=0.5, higher_is_better=False):
        self.eta = float(eta0)
        self.patience = patience
        self.factor = factor
        self.sign = -1.0 if higher_is_better else 1.0
        self.best = None
        self.bad = 0

    def observe(self, value: float) -> float:
        v = self.sign * value
        if self.best is None or v < self.best:
            self.best = v
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.eta *= self.factor
                self.bad = 0
        return self.eta


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["examples_seen"] <= self.records[-1]["examples_seen"]:
            raise ValueError("examples_seen must increase")
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path, encoding="utf-8") as f:
            return cls([json.loads(line) for line in f if line.strip()])

    def final_report(self) -> MetricsReport:
        return MetricsReport.from_dict(self.records[-1]["valid"])


@dataclass
class HiddenCache:
    contexts: np.ndarray
    x0: np.ndarray
    acts: list
    version: int


def _plateau_value(report: MetricsReport, metric: str) -> float:
    if metric == "mrr":
        return report.mrr
    return report.topk[int(metric[3:])]


class NgramModel:
    def __init__(self, config: ModelConfig, freqs=None):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.E = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(cfg.vocab_size, cfg.emb_dim))
        self.Ws, self.bs = [], []
        fan_in = cfg.context_len * cfg.emb_dim
        for size in cfg.hidden_sizes:
            bound = cfg.init_scale / math.sqrt(fan_in)
            self.Ws.append(rng.uniform(-bound, bound, size=(size, fan_in)))
            self.bs.append(np.zeros(size))
            fan_in = size
        head_seed = int(rng.integers(2**31))
        self.head = make_head(cfg.head, cfg.vocab_size, cfg.head_dim, cfg.loss, cfg.loss_params(),
                              freqs=freqs, n_clusters=cfg.n_clusters,
                              init_scale=cfg.init_scale / math.sqrt(cfg.head_dim),
                              seed=head_seed, refactor_period=cfg.refactor_period)
        self._version = 0

    # ------------------------------------------------------------------

    def _act(self, Z):
        return np.tanh(Z) if self.config.activation == "tanh" else np.maximum(Z, 0.0)

    def forward_hidden(self, contexts):
        """Hidden representation for a batch of contexts, shape ``(K, head_dim)``."""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
        if contexts.shape[1] != self.config.context_len:
            raise DataError(f"contexts must have {self.config.context_len} ids, "
                            f"got {contexts.shape[1]}")
        if contexts.size and (contexts.min() < 0 or contexts.max() >= self.config.vocab_size):
            raise DataError("context id out of range")
        x = self.E[contexts].reshape(contexts.shape[0], -1)
        acts = [x]
        for W, b in zip(self.Ws, self.bs):
            x = self._act(x @ W.T + b)
            acts.append(x)
        H = x
        if self.config.output_bias:
            H = np.concatenate([H, np.ones((H.shape[0], 1))], axis=1)
        return H, HiddenCache(contexts, acts[0], acts[1:], self._version)

    def backward_step(self, cache: HiddenCache, G_H, eta: float) -> None:
        """SGD step on hidden layers and touched embedding rows; ``eta`` scales the summed gradient."""
        if cache.version != self._version:
            raise ContractError("model parameters changed since this forward pass")
        G = np.atleast_2d(np.asarray(G_H, dtype=np.float64))
        if self.config.output_bias:
            G = G[:, :-1]
        inputs = [cache.x0] + cache.acts[:-1]
        grads = []
        for layer in range(len(self.Ws) - 1, -1, -1):
            A = cache.acts[layer]
            dZ = G * (1.0 - A * A) if self.config.activation == "tanh" else G * (A > 0)
            grads.append((layer, dZ.T @ inputs[layer], dZ.sum(axis=0)))
            G = dZ @ self.Ws[layer]
        if eta == 0.0:
            return
        for layer, gW, gb in grads:
            self.Ws[layer] -= eta * gW
            self.bs[layer] -= eta * gb
        K, n = cache.contexts.shape
        gE = G.reshape(K * n, self.config.emb_dim)
        np.add.at(self.E, cache.contexts.reshape(-1), -eta * gE)
        self._version += 1

    def train_batch(self, contexts, targets, eta: float):
        """Forward, head step and backward step with the minibatch-averaged rate ``eta / K``."""
        H, cache = self.forward_hidden(contexts)
        step = eta / H.shape[0]
        res = self.head.step_batch(H, targets, step)
        self.backward_step(cache, res.input_grads, step)
        return res

    def scores(self, contexts) -> np.ndarray:
        H, _ = self.forward_hidden(contexts)
        return self.head.scores_batch(H)

    # ------------------------------------------------------------------

    def save(self, path) -> None:
        arrays = {"E": self.E}
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
        for k, v in self.head.state_arrays().items():
            arrays[f"head_{k}"] = v
        meta = {"model": asdict(self.config), "head": self.head.config()}
        with open(path, "wb") as f:
            np.savez(f, _meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "NgramModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["_meta"]))
            arrays = {k: z[k] for k in z.files}
        cfg = ModelConfig(**meta["model"])
        model = cls.__new__(cls)
        model.config = cfg
        model.E = arrays["E"]
        n = len(cfg.hidden_sizes)
        model.Ws = [arrays[f"W{i}"] for i in range(n)]
        model.bs = [arrays[f"b{i}"] for i in range(n)]
        head_arrays = {k[5:]: v for k, v in arrays.items() if k.startswith("head_")}
        model.head = HEAD_CLASSES[cfg.head].from_state(head_arrays, meta["head"], cfg.loss,
                                                       cfg.loss_params())
        model._version = 0
        return model


# --------------------------------------------------------------------------
# evaluation and training loops
# --------------------------------------------------------------------------


def _eval_workers(workers):
    if workers is None:
        workers = int(os.environ.get(EVAL_WORKERS_ENV, "1") or 1)
    return max(1, workers)


def evaluate(model: NgramModel, data: NgramDataset, k_set=DEFAULT_KSET, workers=None,
             chunk: int = 512) -> MetricsReport:
    if len(data) == 0:
        raise DataError("empty evaluation set")
    starts = list(range(0, len(data), chunk))

    def run(start):
        acc = RankAccumulator(tuple(k_set))
        sl = slice(start, start + chunk)
        acc.add(ranks_batch(model.scores(data.contexts[sl]), data.targets[sl]))
        return acc

    workers = _eval_workers(workers)
    total = RankAccumulator(tuple(k_set))
    if workers == 1:
        parts = map(run, starts)
    else:
        pool = ThreadPoolExecutor(workers)
        parts = pool.map(run, starts)
    for part in parts:
        total.merge(part)
    if workers != 1:
        pool.shutdown()
    return total.report()


def train(model: NgramModel, train_data: NgramDataset, valid_data: NgramDataset,
          cfg: TrainConfig, log_path=None, callback=None) -> TrainLog:
    if len(train_data) == 0 or len(valid_data) == 0:
        raise DataError("training and validation data must be non-empty")
    k_set = set(cfg.k_set)
    if cfg.metric_for_plateau != "mrr":
        k_set.add(int(cfg.metric_for_plateau[3:]))
    k_set = tuple(sorted(k_set))
    schedule = PlateauSchedule(cfg.eta0, cfg.plateau_patience, cfg.plateau_factor,
                               higher_is_better=cfg.metric_for_plateau == "mrr")
    trainlog = TrainLog()
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.perf_counter()
    seen = 0
    next_eval = cfg.eval_every if cfg.eval_every > 0 else None
    loss_sum, loss_n, skipped = 0.0, 0, 0

    def checkpoint(epoch):
        nonlocal loss_sum, loss_n, skipped
        report = evaluate(model, valid_data, k_set)
        record = {"examples_seen": seen, "epoch": epoch,
                  "wall_seconds": time.perf_counter() - t0, "eta": schedule.eta,
                  "train_loss": loss_sum / max(loss_n, 1), "skipped": skipped,
                  "valid": report.to_dict()}
        trainlog.append(record)
        if sink:
            sink.write(json.dumps(record) + "\n")
            sink.flush()
        log.info("epoch %d seen %d eta %.4g loss %.4f | %s", epoch, seen, schedule.eta,
                 record["train_loss"], report)
        if callback:
            callback(record)
        schedule.observe(_plateau_value(report, cfg.metric_for_plateau))
        loss_sum, loss_n, skipped = 0.0, 0, 0

    try:
        for epoch in range(cfg.max_epochs):
            seed = None if cfg.shuffle_seed is None else cfg.shuffle_seed + epoch
            for contexts, targets in batch_stream(train_data, cfg.batch_size, seed):
                res = model.train_batch(contexts, targets, schedule.eta)
                if not np.all(np.isfinite(res.values)):
                    raise FloatingPointError(f"non-finite training loss after {seen} examples")
                seen += len(targets)
                loss_sum += float(res.values.sum())
                loss_n += len(targets)
                if res.skipped:
                    log.warning("%d degenerate examples skipped", res.skipped)
                    skipped += res.skipped
                if next_eval is not None and seen >= next_eval:
                    checkpoint(epoch)
                    while next_eval <= seen:
                        next_eval += cfg.eval_every
            if next_eval is None:
                checkpoint(epoch)
        if not trainlog.records or trainlog.records[-1]["examples_seen"] != seen:
            checkpoint(cfg.max_epochs - 1)
    finally:
        if sink:
            sink.close()
    return trainlog
