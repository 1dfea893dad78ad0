"""Command-line entry point: ``zloss {build-vocab,train,eval,gradcheck,bench}``.

Settings come from three layers, later ones winning: built-in defaults, an
optional ``--preset``, an optional ``--config`` file of ``key = value`` lines,
and finally explicit flags. Keys in the file use the long flag names with
dashes or underscores (``batch = 250``, ``max-vocab = 10000``).

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import backend_name
from .corpus import Vocab, build_vocab, encode_ngrams, read_lines, synthetic_corpus
from .factored import SingularUpdate
from .heads import HEAD_KINDS, default_n_clusters, make_head
from .losses import (ALL_KINDS, LossConfigError, ZLossParams, canonical_kind,
                     grad_tolerance, gradient_sweep, is_spherical)
from .metrics import DataError
from .model import ModelConfig, NgramModel, TrainConfig, evaluate, train

log = logging.getLogger("zloss")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

BENCH_COLUMNS = ("head", "loss", "D", "d", "batch", "steps",
                 "sec_per_1k_examples_output_only", "sec_per_1k_examples_total",
                 "extrapolated_epoch_seconds")

TRAIN_DEFAULTS = {
    "train": None, "valid": None, "test": None, "vocab": None, "out": "runs/run",
    "synthetic": 0, "max_vocab": 10000, "min_count": 1,
    "loss": "zloss", "head": "factored", "a": 0.1, "b": 10.0,
    "context": 6, "batch": 250, "eta": 0.1, "epochs": 10, "emb": 64, "hidden": "256",
    "activation": "tanh", "init_scale": 1.0, "output_bias": False,
    "refactor_period": 512, "n_clusters": 0, "eval_every": 0,
    "plateau_patience": 2, "plateau_factor": 0.5, "plateau_metric": "top1",
    "kset": "1,5,10,20,50,100", "seed": 0,
}

PRESETS = {
    # minibatches of 250 with a 6-word input context
    "ptb": {"context": 6, "batch": 250},
    # reference loss-surface parameters: 1000 classes, a=0.1, b=10
    "fig1": {"loss": "zloss", "max_vocab": 998, "a": 0.1, "b": 10.0},
    # the language-model sweep used b=28 throughout
    "lm-sweep": {"loss": "zloss", "head": "factored", "b": 28.0, "context": 6, "batch": 250},
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _coerce(key: str, value, template):
    if template is None or isinstance(value, type(template)) and not isinstance(value, bool):
        return value
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in _BOOL_TRUE:
            return True
        if v in _BOOL_FALSE:
            return False
        raise LossConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return type(template)(value)
    except (TypeError, ValueError) as exc:
        raise LossConfigError(f"{key}: cannot parse {value!r}") from exc


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise LossConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LossConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    """Merge defaults, preset, config file and explicit flags (in that order)."""
    cfg = dict(defaults)
    layers = []
    if getattr(args, "preset", None):
        layers.append(PRESETS[args.preset])
    if getattr(args, "config", None):
        layers.append(read_config_file(args.config))
    layers.append({k: v for k, v in vars(args).items() if k in defaults and v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                raise LossConfigError(f"unknown configuration key {key!r}")
            cfg[key] = _coerce(key, value, defaults[key])
    return cfg


def parse_int_list(text, name="list") -> tuple[int, ...]:
    try:
        values = tuple(int(float(x)) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise LossConfigError(f"{name}: expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise LossConfigError(f"{name}: empty list")
    return values


def parse_sweeps(specs) -> list[dict]:
    """``["a=0.05,0.4", "seed=0,1"]`` -> cartesian product of overrides."""
    if not specs:
        return [{}]
    keys, grids = [], []
    for spec in specs:
        if "=" not in spec:
            raise LossConfigError(f"--sweep expects key=v1,v2,..., got {spec!r}")
        key, values = spec.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in TRAIN_DEFAULTS:
            raise LossConfigError(f"--sweep: unknown key {key!r}")
        keys.append(key)
        grids.append([v.strip() for v in values.split(",") if v.strip()])
    return [dict(zip(keys, combo)) for combo in itertools.product(*grids)]


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    loss = canonical_kind(cfg["loss"])
    if cfg["head"] not in HEAD_KINDS:
        raise LossConfigError(f"unknown head {cfg['head']!r}; expected one of {HEAD_KINDS}")
    if cfg["head"] == "factored" and not is_spherical(loss):
        raise LossConfigError(f"loss {loss!r} is not spherical; the factored head needs "
                              "zloss, mse or taylor")
    if cfg["head"] == "hsm" and loss != "logsoftmax":
        raise LossConfigError("the hsm head trains its own softmax; use --loss logsoftmax")
    return ModelConfig(
        vocab_size=vocab_size, context_len=cfg["context"], emb_dim=cfg["emb"],
        hidden_sizes=parse_int_list(cfg["hidden"], "hidden"), activation=cfg["activation"],
        head=cfg["head"], loss=loss, a=cfg["a"], b=cfg["b"], seed=cfg["seed"],
        init_scale=cfg["init_scale"], output_bias=cfg["output_bias"],
        refactor_period=cfg["refactor_period"], n_clusters=cfg["n_clusters"] or None)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(eta0=cfg["eta"], batch_size=cfg["batch"],
                       plateau_patience=cfg["plateau_patience"],
                       plateau_factor=cfg["plateau_factor"], max_epochs=cfg["epochs"],
                       eval_every=cfg["eval_every"], metric_for_plateau=cfg["plateau_metric"],
                       shuffle_seed=cfg["seed"], k_set=parse_int_list(cfg["kset"], "kset"))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    vocab = build_vocab(read_lines(args.train), args.max_vocab or None, args.min_count)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} entries to {args.out}")
    return EXIT_OK


def _load_splits(cfg: dict):
    """Corpus lines for train/valid/test, either from files or generated."""
    if cfg["train"]:
        train_lines = list(read_lines(cfg["train"]))
        valid_lines = list(read_lines(cfg["valid"])) if cfg["valid"] else None
        test_lines = list(read_lines(cfg["test"])) if cfg["test"] else None
        if valid_lines is None:
            raise LossConfigError("--valid is required together with --train")
        return train_lines, valid_lines, test_lines
    if cfg["synthetic"] > 0:
        lines = synthetic_corpus(cfg["synthetic"], seed=12345)
        n = len(lines)
        a, b = int(0.8 * n), int(0.9 * n)
        return lines[:a], lines[a:b], lines[b:]
    raise LossConfigError("need --train/--valid corpus files or --synthetic N")


def _run_one(cfg: dict, run_dir: Path) -> dict:
    train_lines, valid_lines, test_lines = _load_splits(cfg)
    if cfg["vocab"]:
        if not Path(cfg["vocab"]).is_file():
            raise DataError(f"vocabulary file not found: {cfg['vocab']}")
        vocab = Vocab.load(cfg["vocab"])
    else:
        vocab = build_vocab(train_lines, cfg["max_vocab"] or None, cfg["min_count"])
    n = cfg["context"] + 1
    train_data = encode_ngrams(train_lines, vocab, n)
    valid_data = encode_ngrams(valid_lines, vocab, n)
    test_data = encode_ngrams(test_lines, vocab, n) if test_lines else None
    model_cfg = _model_config(cfg, len(vocab))
    train_cfg = _train_config(cfg)

    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = dict(cfg, vocab_size=len(vocab), n_train=len(train_data),
                    n_valid=len(valid_data), backend=backend_name(), version=__version__)
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    vocab.save(run_dir / "vocab.txt")

    freqs = np.bincount(train_data.targets, minlength=len(vocab))
    model = NgramModel(model_cfg, freqs=freqs)
    log.info("training %s head with %s loss: D=%d, %d train / %d valid n-grams",
             model_cfg.head, model_cfg.loss, len(vocab), len(train_data), len(valid_data))
    train(model, train_data, valid_data, train_cfg, log_path=run_dir / "trainlog.jsonl")
    model.save(run_dir / "model.npz")
    final = evaluate(model, test_data if test_data is not None else valid_data,
                     train_cfg.k_set)
    report = {"split": "test" if test_data is not None else "valid", **final.to_dict()}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{run_dir}: {final}")
    return report


def cmd_train(args) -> int:
    base = resolve_config(TRAIN_DEFAULTS, args)
    grid = parse_sweeps(args.sweep)
    out = Path(base["out"])
    for overrides in grid:
        cfg = dict(base)
        for key, value in overrides.items():
            cfg[key] = _coerce(key, value, TRAIN_DEFAULTS[key])
        name = ",".join(f"{k}={v}" for k, v in overrides.items())
        _run_one(cfg, out / name if name else out)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    vocab_path = Path(args.vocab) if args.vocab else ckpt.with_name("vocab.txt")
    if not vocab_path.is_file():
        raise DataError(f"vocabulary file not found: {vocab_path}")
    model = NgramModel.load(ckpt)
    vocab = Vocab.load(vocab_path)
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocabulary has {len(vocab)} entries, model expects "
                        f"{model.config.vocab_size}")
    data = encode_ngrams(read_lines(args.data), vocab, model.config.context_len + 1)
    report = evaluate(model, data, parse_int_list(args.kset, "kset"))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = ALL_KINDS if args.loss == "all" else tuple(args.loss.split(","))
    kinds = tuple(canonical_kind(k) for k in kinds)
    dims = parse_int_list(args.dims, "dims")
    t0 = time.perf_counter()
    results = gradient_sweep(kinds, dims, args.trials, args.seed, args.eps)
    ok = True
    for (kind, D), (worst, skipped) in results.items():
        tol = grad_tolerance(kind)
        passed = worst <= tol
        ok &= passed
        note = f" ({skipped} degenerate skipped)" if skipped else ""
        print(f"{kind:<11s} D={D:<6d} max_rel_error={worst:.3e} tol={tol:.0e} "
              f"{'ok' if passed else 'FAIL'}{note}")
    print(f"{len(results)} cells in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------


def _timed_steps(step, steps: int, max_seconds: float) -> tuple[int, float]:
    step()  # warm-up (compilation, first-touch page faults)
    done, t0 = 0, time.perf_counter()
    while done < steps:
        step()
        done += 1
        if done >= 2 and time.perf_counter() - t0 > max_seconds:
            break
    return done, time.perf_counter() - t0


def bench_cell(head_kind: str, loss: str, D: int, d: int, batch: int, steps: int,
               max_seconds: float = 60.0, seed: int = 0, context: int = 6, emb: int = 32,
               epoch_examples: float = 150e6, eta: float = 0.01) -> dict:
    """Time one (head, D) cell on synthetic data; see :data:`BENCH_COLUMNS`."""
    rng = np.random.default_rng(seed)
    loss = "logsoftmax" if head_kind == "hsm" else canonical_kind(loss)
    params = ZLossParams(0.1, 10.0) if loss in ("zloss", "sz") else None
    freqs = np.ones(D)

    def fresh_head():
        head = make_head(head_kind, D, d, loss, params, freqs=freqs,
                         n_clusters=default_n_clusters(D), init_scale=1.0 / math.sqrt(d),
                         seed=seed, refactor_period=0)
        if head_kind == "factored":
            head.layer.cond_limit = math.inf
        return head

    head = fresh_head()
    H = rng.normal(size=(batch, d)) / math.sqrt(d)
    targets = rng.integers(0, D, size=batch)
    n_out, t_out = _timed_steps(lambda: head.step_batch(H, targets, eta / batch),
                                steps, max_seconds)
    del head

    model = NgramModel(ModelConfig(vocab_size=D, context_len=context, emb_dim=emb,
                                   hidden_sizes=(d,), head=head_kind, loss=loss, seed=seed,
                                   refactor_period=0), freqs=freqs)
    if head_kind == "factored":
        model.head.layer.cond_limit = math.inf
    contexts = rng.integers(0, D, size=(batch, context))
    n_tot, t_tot = _timed_steps(lambda: model.train_batch(contexts, targets, eta),
                                steps, max_seconds)
    per_out = t_out / (n_out * batch) * 1000
    per_tot = t_tot / (n_tot * batch) * 1000
    return {"head": head_kind, "loss": loss, "D": D, "d": d, "batch": batch,
            "steps": min(n_out, n_tot),
            "sec_per_1k_examples_output_only": per_out,
            "sec_per_1k_examples_total": per_tot,
            "extrapolated_epoch_seconds": per_tot * epoch_examples / 1000}


def cmd_bench(args) -> int:
    dlist = parse_int_list(args.dlist, "dlist")
    heads = tuple(h.strip() for h in args.heads.split(","))
    for h in heads:
        if h not in HEAD_KINDS:
            raise LossConfigError(f"unknown head {h!r}")
    loss = canonical_kind(args.loss)
    if "factored" in heads and not is_spherical(loss):
        raise LossConfigError(f"loss {loss!r} cannot be benchmarked on the factored head")
    sink = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(sink, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for head in heads:
            for D in dlist:
                row = bench_cell(head, loss, D, args.d, args.batch, args.steps,
                                 args.max_seconds, args.seed,
                                 epoch_examples=args.epoch_examples)
                writer.writerow(row)
                sink.flush()
                log.info("%s D=%d: %.4g s/1k output-only", head, D,
                         row["sec_per_1k_examples_output_only"])
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing and dispatch
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zloss", description="Spherical-loss output layers for large vocabularies.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    v = sub.add_parser("build-vocab", help="count tokens and write a vocabulary file")
    v.add_argument("--train", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--max-vocab", type=int, default=10000)
    v.add_argument("--min-count", type=int, default=1)

    t = sub.add_parser("train", help="train an n-gram model (optionally a sweep)")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--train")
    t.add_argument("--valid")
    t.add_argument("--test")
    t.add_argument("--vocab")
    t.add_argument("--synthetic", type=int, metavar="N_TOKENS")
    t.add_argument("--max-vocab", type=int)
    t.add_argument("--min-count", type=int)
    t.add_argument("--loss", choices=ALL_KINDS)
    t.add_argument("--head", choices=HEAD_KINDS)
    t.add_argument("--a", type=float)
    t.add_argument("--b", type=float)
    t.add_argument("--context", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--eta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--emb", type=int)
    t.add_argument("--hidden", help="comma-separated hidden layer sizes")
    t.add_argument("--activation", choices=("tanh", "relu"))
    t.add_argument("--init-scale", type=float)
    t.add_argument("--refactor-period", type=int)
    t.add_argument("--n-clusters", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--plateau-patience", type=int)
    t.add_argument("--plateau-factor", type=float)
    t.add_argument("--plateau-metric", choices=("top1", "top5", "mrr"))
    t.add_argument("--kset")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="train one run per value; repeat for a grid")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--vocab")
    e.add_argument("--kset", default="1,5,10,20,50,100")
    e.add_argument("--out")

    g = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    g.add_argument("--loss", default="all", help="loss kind, comma list or 'all'")
    g.add_argument("--dims", default="5,50,1000")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="time output layers across vocabulary sizes")
    b.add_argument("--dlist", default="20000,200000")
    b.add_argument("--d", type=int, default=512)
    b.add_argument("--batch", type=int, default=250)
    b.add_argument("--steps", type=int, default=2000, help="minibatches per cell")
    b.add_argument("--max-seconds", type=float, default=60.0,
                   help="stop a cell early after this much timed wall time")
    b.add_argument("--heads", default="dense,factored,hsm")
    b.add_argument("--loss", default="zloss")
    b.add_argument("--epoch-examples", type=float, default=150e6)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default: stdout)")
    return p


COMMANDS = {"build-vocab": cmd_build_vocab, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularUpdate, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:  # LossConfigError and invalid settings
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
