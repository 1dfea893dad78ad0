"""Vocabulary, n-gram encoding and minibatching for whitespace-tokenized corpora."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .metrics import DataError

UNK = "<unk>"
BOS = "<s>"
CACHE_MAGIC = b"ZNG1"
_HEADER = struct.Struct("<4sQI")  # magic, N, n  (16 bytes)


@dataclass
class Vocab:
    tokens: list[str]
    counts: np.ndarray
    unk_id: int
    bos_id: int | None = None

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def decode(self, i: int) -> str:
        return self.tokens[i]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            bos = self.tokens[self.bos_id] if self.bos_id is not None else ""
            f.write(f"{len(self.tokens)}\t{self.tokens[self.unk_id]}\t{bos}\n")
            for tok, n in zip(self.tokens, self.counts):
                f.write(f"{tok}\t{int(n)}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            header = f.readline().rstrip("\n").split("\t")
            try:
                D = int(header[0])
                unk = header[1]
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}: bad vocab header {header!r}") from exc
            bos = header[2] if len(header) > 2 and header[2] else None
            tokens, counts = [], []
            for line in f:
                parts = line.rstrip("\n").split("\t")
                tokens.append(parts[0])
                counts.append(int(parts[1]) if len(parts) > 1 else 0)
        if len(tokens) != D:
            raise DataError(f"{path}: header says {D} tokens, found {len(tokens)}")
        index = {t: i for i, t in enumerate(tokens)}
        if unk not in index:
            raise DataError(f"{path}: unknown-token {unk!r} is not in the vocabulary")
        return cls(tokens, np.array(counts, dtype=np.int64), index[unk],
                   index[bos] if bos is not None else None)


def read_lines(path) -> Iterator[str]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"corpus file not found: {path}")
    with open(p, encoding="utf-8") as f:
        yield from f


def build_vocab(lines: Iterable[str], max_size: int | None = None, min_count: int = 1,
                unk: str = UNK, bos: str | None = BOS) -> Vocab:
    """Most frequent tokens first (ties: first occurrence). Dropped tokens count as unk.

    A literal ``unk`` token in the corpus is ranked like any other token; if it
    never occurs, it is appended after the kept tokens. The boundary token, when
    requested, comes last with count zero.
    """
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.split())
    if not counts:
        raise DataError("empty corpus")
    # Counter preserves first-insertion order, so a stable sort breaks ties by first occurrence
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    kept, dropped = [], 0
    for tok, n in ranked:
        if tok == bos:
            continue
        if n >= min_count and (max_size is None or len(kept) < max_size or tok == unk):
            kept.append([tok, n])
        else:
            dropped += n
    tokens = [t for t, _ in kept]
    freq = [n for _, n in kept]
    if unk in tokens:
        freq[tokens.index(unk)] += dropped
    else:
        tokens.append(unk)
        freq.append(dropped)
    bos_id = None
    if bos is not None:
        bos_id = len(tokens)
        tokens.append(bos)
        freq.append(counts.get(bos, 0))
    return Vocab(tokens, np.array(freq, dtype=np.int64), tokens.index(unk), bos_id)


@dataclass
class NgramDataset:
    contexts: np.ndarray  # (N, n-1) int
    targets: np.ndarray   # (N,) int

    def __post_init__(self):
        self.contexts = np.ascontiguousarray(self.contexts, dtype=np.int64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.int64)
        if self.contexts.ndim != 2 or self.contexts.shape[0] != self.targets.shape[0]:
            raise DataError("contexts must be (N, n-1) and match the number of targets")

    def __len__(self):
        return self.targets.shape[0]

    @property
    def context_len(self) -> int:
        return self.contexts.shape[1]

    def subset(self, idx) -> "NgramDataset":
        return NgramDataset(self.contexts[idx], self.targets[idx])

    def save(self, path) -> None:
        N, n = len(self), self.context_len + 1
        block = np.concatenate([self.contexts, self.targets[:, None]], axis=1).astype("<i4")
        with open(path, "wb") as f:
            f.write(_HEADER.pack(CACHE_MAGIC, N, n))
            f.write(block.tobytes())

    @classmethod
    def load(cls, path) -> "NgramDataset":
        raw = Path(path).read_bytes()
        magic, N, n = _HEADER.unpack_from(raw)
        if magic != CACHE_MAGIC:
            raise DataError(f"{path}: not an n-gram cache file")
        block = np.frombuffer(raw, dtype="<i4", offset=_HEADER.size)
        if block.size != N * n:
            raise DataError(f"{path}: truncated cache ({block.size} ids, expected {N * n})")
        block = block.reshape(N, n).astype(np.int64)
        return cls(block[:, :-1], block[:, -1])


def encode_ngrams(lines: Iterable[str], vocab: Vocab, n: int) -> NgramDataset:
    """One (previous n-1 ids, next id) pair per token; each line starts with n-1 boundary pads."""
    if n < 2:
        raise ValueError("n must be >= 2")
    pad = vocab.bos_id if vocab.bos_id is not None else vocab.unk_id
    ctx, tgt = [], []
    for line in lines:
        ids = [vocab.encode(t) for t in line.split()]
        if not ids:
            continue
        seq = [pad] * (n - 1) + ids
        for i, target in enumerate(ids):
            ctx.append(seq[i:i + n - 1])
            tgt.append(target)
    if not tgt:
        raise DataError("no tokens to encode")
    return NgramDataset(np.array(ctx, dtype=np.int64), np.array(tgt, dtype=np.int64))


def batch_stream(dataset: NgramDataset, batch_size: int, seed=None):
    """Yield ``(contexts, targets)`` minibatches; shuffled iff ``seed`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    N = len(dataset)
    order = np.arange(N) if seed is None else np.random.default_rng(seed).permutation(N)
    for start in range(0, N, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.contexts[idx], dataset.targets[idx]


def synthetic_corpus(n_tokens: int, vocab_size: int = 2000, seed: int = 0,
                     mean_sentence: int = 20, zipf: float = 1.1,
                     branching: int = 8) -> list[str]:
    """Sentences from a random sparse bigram source with Zipfian word frequencies.

    Each word has ``branching`` preferred successors drawn from the unigram law;
    the next word is a preferred successor with probability 0.7 and a fresh
    unigram draw otherwise. Used for desk-scale experiments when no real
    corpus is available.
    """
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, vocab_size + 1)
    unigram = ranks ** -zipf
    unigram /= unigram.sum()
    succ = rng.choice(vocab_size, size=(vocab_size, branching), p=unigram)
    succ_cdf = np.cumsum(rng.dirichlet(np.ones(branching) * 0.5, size=vocab_size), axis=1)
    fresh = rng.choice(vocab_size, size=n_tokens + 1, p=unigram).tolist()
    follow = (rng.random(n_tokens) < 0.7).tolist()
    pick = rng.random(n_tokens).tolist()
    lines = []
    produced = 0
    while produced < n_tokens:
        length = min(max(1, int(rng.poisson(mean_sentence))), n_tokens - produced)
        w = fresh[produced]
        words = []
        for i in range(produced, produced + length):
            words.append(w)
            if follow[i]:
                k = min(int(np.searchsorted(succ_cdf[w], pick[i])), branching - 1)
                w = int(succ[w, k])
            else:
                w = fresh[i + 1]
        lines.append(" ".join(f"w{x}" for x in words))
        produced += length
    return lines
