"""Attention-distribution divergence and artifact emission.

KL is measured as KL(quantized || baseline) per head over the key axis,
natural log, with probabilities floored at 1e-12 before the log, then
averaged over query positions and a seeded sample of inputs. Writers are
deterministic: fixed field orders, sorted JSON keys, no timestamps, so a
rerun with the same config is byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12


@dataclass
class KLReport:
    per_head: np.ndarray  # (n_layers, n_heads)
    per_layer: np.ndarray  # (n_layers,)
    n_samples: int


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis with both distributions floored."""
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    return (p * (np.log(p) - np.log(q))).sum(axis=-1)


def attention_kl(
    quantized_traces_fn,
    baseline_traces_fn,
    dataset,
    fraction: float = 0.10,
    seed: int = 0,
    batch_size: int = 256,
) -> KLReport:
    """Mean attention KL per head and per layer on a seeded input sample.

    The two callables map a token batch to a list of per-layer attention
    probability arrays (B, H, n, n); the mean runs over sampled inputs and
    query positions.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(dataset)
    take = max(1, round(fraction * n))
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=take, replace=False)
    sums = None
    count = 0
    for s in range(0, take, batch_size):
        batch = dataset.tokens[idx[s : s + batch_size]]
        qt = quantized_traces_fn(batch)
        bt = baseline_traces_fn(batch)
        if len(qt) != len(bt):
            raise ValueError("trace lists differ in layer count")
        if sums is None:
            sums = [np.zeros(t.shape[1], dtype=np.float64) for t in qt]
        for layer, (a, b) in enumerate(zip(qt, bt)):
            # (B, H, n, n) -> KL over keys -> sum over batch and queries
            sums[layer] += kl_rows(a, b).sum(axis=(0, 2))
        count += batch.shape[0] * qt[0].shape[2]
    if sums is None:
        raise ValueError("empty dataset")
    per_head = np.stack([s / count for s in sums]) if sums else np.zeros((0, 0))
    per_layer = per_head.mean(axis=1) if per_head.size else np.zeros(0)
    return KLReport(per_head, per_layer, take)


# -- deterministic writers ----------------------------------------------------


def write_csv(path, header: list[str], rows: list) -> Path:
    """RFC-4180-style CSV with \\n line endings and minimal quoting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else _fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def write_jsonl(path, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")
    return path


def emit_report(results: dict, out_dir) -> list[Path]:
    """Write whatever result tables are present; absent keys are skipped,
    empty tables still get their header row."""
    out = Path(out_dir)
    written: list[Path] = []
    tables = {
        "sensitivity": ["task", "layer", "mean_eig", "std_eig", "omega"],
        "eigenvalues": ["task", "layer", "run", "eigenvalue"],
        "allocation": ["layer", "bits"],
        "sizes": ["run", "weight_mb", "no_embedding_mb", "metadata_mb"],
        "accuracy": ["run", "split", "loss", "accuracy"],
        "kl": ["run", "layer", "head", "kl"],
    }
    for key, header in tables.items():
        if key in results:
            written.append(write_csv(out / f"{key}.csv", header, results[key]))
    if "meta" in results:
        written.append(write_json(out / "run_meta.json", results["meta"]))
    return written
