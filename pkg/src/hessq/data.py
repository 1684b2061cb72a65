"""Synthetic sequence classification tasks and CSV ingestion.

Three token-level binary tasks that a two-layer encoder can actually
learn, generated with balanced labels (45..55%) by construction:

  majority_token    label 1 iff odd token ids outnumber even ones
                    (ties are resampled)
  contains_pattern  label 1 iff the bigram (3, 7) occurs; positives are
                    planted, negatives rejection-sampled
  sorted_order      label 1 iff the sequence is sorted ascending

Token id conventions: 0 is padding, 1 is reserved, content ids live in
[2, vocab). CSV rows are ``tok_0,...,tok_{n-1},label``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig

TASKS = ("majority_token", "contains_pattern", "sorted_order")

PATTERN = (3, 7)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    tokens: np.ndarray  # (N, max_len) int64
    labels: np.ndarray  # (N,) int64
    task: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or self.labels.shape != (self.tokens.shape[0],):
            raise DataError("tokens must be (N, n) with labels (N,)")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def balance(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0


def _gen_majority(rng, size, n, vocab):
    tokens = np.empty((size, n), dtype=np.int64)
    labels = np.empty(size, dtype=np.int64)
    for i in range(size):
        while True:
            row = rng.integers(2, vocab, size=n)
            odd = int((row % 2 == 1).sum())
            if odd * 2 != n:
                break
        tokens[i] = row
        labels[i] = 1 if odd * 2 > n else 0
    return tokens, labels


def _has_pattern(row) -> bool:
    a, b = PATTERN
    return bool(np.any((row[:-1] == a) & (row[1:] == b)))


def _gen_pattern(rng, size, n, vocab):
    if vocab <= max(PATTERN):
        raise DataError(f"vocab {vocab} too small for pattern {PATTERN}")
    tokens = np.empty((size, n), dtype=np.int64)
    labels = rng.integers(0, 2, size=size)
    for i in range(size):
        if labels[i]:
            row = rng.integers(2, vocab, size=n)
            pos = int(rng.integers(0, n - 1))
            row[pos], row[pos + 1] = PATTERN
            tokens[i] = row
        else:
            while True:
                row = rng.integers(2, vocab, size=n)
                if not _has_pattern(row):
                    break
            tokens[i] = row
    return tokens, labels.astype(np.int64)


def _gen_sorted(rng, size, n, vocab):
    tokens = np.empty((size, n), dtype=np.int64)
    labels = rng.integers(0, 2, size=size)
    for i in range(size):
        row = np.sort(rng.integers(2, vocab, size=n))
        if not labels[i]:
            while True:
                perm = rng.permutation(row)
                if not np.all(perm[:-1] <= perm[1:]):
                    row = perm
                    break
        tokens[i] = row
    return tokens, labels.astype(np.int64)


_GENERATORS = {
    "majority_token": _gen_majority,
    "contains_pattern": _gen_pattern,
    "sorted_order": _gen_sorted,
}


def synth_dataset(task: str, size: int, cfg: ModelConfig, seed: int) -> Dataset:
    """Deterministic synthetic split; same arguments, same bytes."""
    if task not in _GENERATORS:
        raise DataError(f"unknown task {task!r}; choose from {TASKS}")
    if size <= 0:
        raise DataError("size must be positive")
    rng = np.random.default_rng(seed)
    tokens, labels = _GENERATORS[task](rng, size, cfg.max_len, cfg.vocab)
    ds = Dataset(tokens, labels, task)
    if size >= 64 and not 0.40 <= ds.balance() <= 0.60:
        raise DataError(f"label balance {ds.balance():.2f} out of range")
    return ds


def load_csv_dataset(path, cfg: ModelConfig, task: str = "csv") -> Dataset:
    """Read ``tok_0,...,tok_{k-1},label`` rows, padding with 0 to max_len."""
    path = Path(path)
    tokens = []
    labels = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and not row[-1].strip().lstrip("-").isdigit()):
                continue  # header or blank
            try:
                vals = [int(v) for v in row]
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: non-integer field ({e})") from None
            *toks, label = vals
            if not toks or len(toks) > cfg.max_len:
                raise DataError(
                    f"{path}:{lineno}: expected 1..{cfg.max_len} tokens, got {len(toks)}"
                )
            if any(t < 0 or t >= cfg.vocab for t in toks):
                raise DataError(f"{path}:{lineno}: token id out of [0, {cfg.vocab})")
            if label not in range(cfg.n_classes):
                raise DataError(f"{path}:{lineno}: label {label} out of range")
            tokens.append(toks + [0] * (cfg.max_len - len(toks)))
            labels.append(label)
    if not tokens:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(tokens), np.array(labels), task)


def save_csv_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        for row, label in zip(ds.tokens, ds.labels):
            w.writerow([int(t) for t in row] + [int(label)])
