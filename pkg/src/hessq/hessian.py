"""Curvature probes: power iteration, shard eigenvalue statistics, landscapes.

All probes address one parameter block (layer) at a time through exact
Hessian-vector products, so nothing here ever materializes a Hessian.
Probing is typically run on a float64 clone of the trained graph.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T


class PowerIterationError(ArithmeticError):
    pass


@dataclass
class EigenEstimate:
    layer: str
    eigenvalue: float
    eigenvector: np.ndarray  # unit norm
    iterations: int
    converged: bool


def _normalized_probe(rng, n: int) -> np.ndarray:
    for _ in range(8):
        v = rng.standard_normal(n)
        norm = np.linalg.norm(v)
        if norm > 0:
            return v / norm
    raise PowerIterationError("could not draw a nonzero probe vector")


def power_iteration(
    graph,
    batch,
    layer: str,
    max_iters: int = 100,
    tol: float = 1e-3,
    seed: int = 0,
    deflate: tuple[float, np.ndarray] | None = None,
) -> EigenEstimate:
    """Dominant (largest magnitude, signed) Hessian eigenvalue of one layer.

    Iterates v <- Hv / ||Hv||, reading off the Rayleigh quotient
    lambda_t = v . Hv each step; stops when
    |lambda_t - lambda_{t-1}| <= tol * max(1, |lambda_t|). A zero Hv on the
    first step triggers up to 3 reseeded restarts before giving up.

    ``deflate=(lambda1, v1)`` probes H' = H - lambda1 v1 v1^T instead
    (Hotelling deflation), which exposes the second eigenpair.
    """
    if max_iters < 1:
        raise PowerIterationError("max_iters must be >= 1")
    if tol <= 0:
        raise PowerIterationError("tol must be positive")
    n = graph.group_size(layer)
    rng = np.random.default_rng(seed)

    def apply_h(vec: np.ndarray) -> np.ndarray:
        hv = T.hvp(graph, batch, layer, vec)
        if deflate is not None:
            lam1, v1 = deflate
            hv = hv - lam1 * float(v1 @ vec) * v1
        return hv

    for restart in range(4):
        v = _normalized_probe(rng, n)
        prev = None
        iters = 0
        dead = False
        for it in range(1, max_iters + 1):
            iters = it
            hv = apply_h(v)
            norm = float(np.linalg.norm(hv))
            if norm == 0.0:
                if it == 1:
                    dead = True  # unlucky probe, try a fresh one
                    break
                # Hv vanished mid-run: the iterate became (numerically) a
                # null direction; the Rayleigh quotient is exactly 0.
                return EigenEstimate(layer, 0.0, v, it, True)
            lam = float(v @ hv)
            v = hv / norm
            if prev is not None and abs(lam - prev) <= tol * max(1.0, abs(lam)):
                return EigenEstimate(layer, lam, v, it, True)
            prev = lam
        if not dead:
            return EigenEstimate(layer, float(prev), v, iters, False)
    raise PowerIterationError(
        f"H @ v vanished for {layer!r} on {restart + 1} different probes"
    )


def top2_eigen(
    graph,
    batch,
    layer: str,
    max_iters: int = 100,
    tol: float = 1e-3,
    seed: int = 0,
) -> tuple[EigenEstimate, EigenEstimate]:
    """Top eigenpair plus the next one via Hotelling deflation.

    The deflated vector is re-orthogonalized against v1 to keep the pair
    usable as landscape axes (|v1 . v2| <= 1e-6 up to convergence).
    """
    e1 = power_iteration(graph, batch, layer, max_iters, tol, seed)
    e2 = power_iteration(
        graph,
        batch,
        layer,
        max_iters,
        tol,
        seed + 1,
        deflate=(e1.eigenvalue, e1.eigenvector),
    )
    v2 = e2.eigenvector - float(e1.eigenvector @ e2.eigenvector) * e1.eigenvector
    norm = np.linalg.norm(v2)
    if norm > 0:
        e2.eigenvector = v2 / norm
    return e1, e2


def eig_distribution(
    graph,
    dataset,
    layer: str,
    shard_fraction: float = 0.10,
    runs: int = 10,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-3,
    threads: int = 1,
) -> list[float]:
    """Top eigenvalue of one layer across independently resampled shards.

    Each run draws round(shard_fraction * N) examples without replacement
    (fresh seeded draw per run) and runs power iteration on that shard.
    Runs are independent, so they may execute on a small thread pool;
    results are ordered by run index either way.
    """
    if not 0.0 < shard_fraction <= 1.0:
        raise ValueError("shard_fraction must be in (0, 1]")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    n = len(dataset)
    shard = max(1, round(shard_fraction * n))
    seeds = np.random.SeedSequence(seed).spawn(runs)

    def one_run(r: int) -> float:
        rng = np.random.default_rng(seeds[r])
        idx = rng.choice(n, size=shard, replace=False)
        batch = (dataset.tokens[idx], dataset.labels[idx])
        g = graph.clone() if threads > 1 else graph
        est = power_iteration(
            g, batch, layer, max_iters=max_iters, tol=tol, seed=seed + 1000 + r
        )
        return est.eigenvalue

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one_run, range(runs)))
    return [one_run(r) for r in range(runs)]


def sensitivity(samples) -> float:
    """Curvature sensitivity of a layer: |mean(lambda)| + std(lambda).

    The std is the population one (ddof=0); instability across data shards
    counts against a layer exactly like high mean curvature does.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("sensitivity needs at least one sample")
    if not np.all(np.isfinite(arr)):
        raise ValueError("sensitivity saw a non-finite eigenvalue")
    return float(abs(arr.mean()) + arr.std(ddof=0))


@dataclass
class LandscapeGrid:
    layer: str
    extent: float
    offsets: np.ndarray  # (resolution,)
    losses: np.ndarray  # (resolution, resolution), may contain nan
    center_loss: float


def landscape_grid(
    graph,
    batch,
    layer: str,
    v1: np.ndarray,
    v2: np.ndarray,
    extent: float,
    resolution: int,
) -> LandscapeGrid:
    """Loss surface over the plane W + a v1 + b v2 of one layer.

    ``resolution`` must be odd so the exact unperturbed point sits at the
    grid center; that cell is evaluated with the parameters untouched and
    is bit-equal to the standalone loss. Non-finite losses off-center are
    recorded as nan, not raised. Parameters are restored afterwards.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be an odd integer >= 3")
    if extent <= 0:
        raise ValueError("extent must be positive")
    inputs, labels = batch
    size = graph.group_size(layer)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != (size,) or v2.shape != (size,):
        raise T.ShapeError(f"direction vectors must have shape {(size,)}")
    offsets = np.linspace(-extent, extent, resolution)
    mid = resolution // 2
    offsets[mid] = 0.0
    base = graph.get_flat(layer).copy()
    losses = np.full((resolution, resolution), np.nan)
    with T.no_grad():
        center = float(graph.loss(inputs, labels).data)
        try:
            for i, a in enumerate(offsets):
                for j, b in enumerate(offsets):
                    if i == mid and j == mid:
                        losses[i, j] = center
                        continue
                    graph.set_flat(layer, base + a * v1 + b * v2)
                    try:
                        losses[i, j] = float(graph.loss(inputs, labels).data)
                    except T.NonFiniteError:
                        losses[i, j] = np.nan
        finally:
            graph.set_flat(layer, base)
    return LandscapeGrid(layer, extent, offsets, losses, center)
