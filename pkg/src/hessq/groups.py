"""Output-neuron group schemes for weight quantization.

A weight matrix is stored as (out_neurons, fan_in...) and grouped along
its first axis. Each group gets its own clipping range, so finer groups
never widen any element's range:

  layerwise  one group over all rows
  per_head   one group per attention head (rows split into n_heads blocks)
  bucketed   contiguous buckets of ``bucket_size`` rows over all rows;
             the trailing bucket may be smaller

A 768-row matrix bucketed at 6 rows yields exactly 128 groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .quantizer import QuantError, QuantRange, QuantSpec, select_range

MODES = ("layerwise", "per_head", "bucketed")


@dataclass(frozen=True)
class GroupSpec:
    """Materialized grouping of ``out_neurons`` rows into contiguous blocks."""

    mode: str
    out_neurons: int
    n_heads: int
    bucket_size: int | None
    starts: tuple[int, ...]

    @property
    def n_groups(self) -> int:
        return len(self.starts) - 1

    def sizes(self) -> list[int]:
        return [self.starts[i + 1] - self.starts[i] for i in range(self.n_groups)]


def build_group_spec(
    out_neurons: int,
    n_heads: int,
    mode: str,
    bucket_size: int | None = None,
) -> GroupSpec:
    if mode not in MODES:
        raise QuantError(f"unknown group mode {mode!r}")
    if out_neurons <= 0:
        raise QuantError("out_neurons must be positive")
    if n_heads <= 0 or out_neurons % n_heads != 0:
        raise QuantError(f"out_neurons {out_neurons} not divisible by n_heads {n_heads}")
    if mode == "layerwise":
        starts: tuple[int, ...] = (0, out_neurons)
    elif mode == "per_head":
        step = out_neurons // n_heads
        starts = tuple(range(0, out_neurons + 1, step))
    else:
        if bucket_size is None or bucket_size <= 0:
            raise QuantError("bucketed mode needs a positive bucket_size")
        edges = list(range(0, out_neurons, bucket_size)) + [out_neurons]
        starts = tuple(edges)
    return GroupSpec(mode, out_neurons, n_heads, bucket_size, starts)


@dataclass
class GroupQuantizedTensor:
    """Per-group codes and ranges for one weight tensor."""

    codes: np.ndarray  # uint16, original shape
    ranges: list[QuantRange]
    spec: GroupSpec
    bits: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    @property
    def n_groups(self) -> int:
        return self.spec.n_groups


def group_ranges(x: np.ndarray, gspec: GroupSpec, qspec: QuantSpec) -> list[QuantRange]:
    """Clipping range of every row group under the spec's policy."""
    x2 = x.reshape(gspec.out_neurons, -1)
    starts = np.asarray(gspec.starts, dtype=np.int64)
    if qspec.range_policy == "minmax":
        if not np.all(np.isfinite(x2)):
            raise QuantError("range selection saw a non-finite value")
        lo, hi = kernels.minmax_grouped(x2, starts)
        return [QuantRange.from_bounds(a, b, qspec.bits) for a, b in zip(lo, hi)]
    return [
        select_range(x2[starts[g] : starts[g + 1]], qspec)
        for g in range(gspec.n_groups)
    ]


def groupwise_quantize(x: np.ndarray, gspec: GroupSpec, qspec: QuantSpec) -> GroupQuantizedTensor:
    """Quantize a weight tensor group by group."""
    x = np.asarray(x)
    if x.ndim < 1 or x.shape[0] != gspec.out_neurons:
        raise QuantError(
            f"tensor first axis {x.shape} does not match spec rows {gspec.out_neurons}"
        )
    ranges = group_ranges(x, gspec, qspec)
    starts = np.asarray(gspec.starts, dtype=np.int64)
    lo = np.array([r.q0 for r in ranges])
    hi = np.array([r.q_max for r in ranges])
    codes, _ = kernels.fake_quant_grouped(
        x.reshape(gspec.out_neurons, -1), starts, lo, hi, 2**qspec.bits
    )
    return GroupQuantizedTensor(codes.reshape(x.shape), ranges, gspec, qspec.bits)


def groupwise_dequantize(gq: GroupQuantizedTensor, dtype=np.float64) -> np.ndarray:
    codes2 = gq.codes.reshape(gq.spec.out_neurons, -1).astype(np.float64)
    reps = np.diff(np.asarray(gq.spec.starts))
    lo = np.repeat([r.q0 for r in gq.ranges], reps)[:, None]
    dl = np.repeat([r.delta for r in gq.ranges], reps)[:, None]
    return (dl * codes2 + lo).reshape(gq.shape).astype(dtype)


def error_bound(gq: GroupQuantizedTensor) -> np.ndarray:
    """Per-element worst-case rounding error, delta/2 of the owning group.

    Elements clipped by a percentile range can exceed this; under minmax
    ranges it is a true bound.
    """
    reps = np.diff(np.asarray(gq.spec.starts))
    half = np.repeat([r.delta / 2.0 for r in gq.ranges], reps)[:, None]
    cols = int(np.prod(gq.shape[1:])) if len(gq.shape) > 1 else 1
    return np.broadcast_to(half, (gq.spec.out_neurons, cols)).reshape(gq.shape).copy()


@dataclass(frozen=True)
class GroupPolicy:
    """Run-level grouping choice, resolved per tensor at quantization time.

    mode "count" asks for a fixed number of groups per tensor and maps to
    contiguous buckets of ceil(rows / count).
    """

    mode: str = "layerwise"  # layerwise | per_head | bucketed | count
    bucket_size: int | None = None
    count: int | None = None

    def __post_init__(self):
        if self.mode not in MODES + ("count",):
            raise QuantError(f"unknown group policy {self.mode!r}")
        if self.mode == "bucketed" and (self.bucket_size is None or self.bucket_size <= 0):
            raise QuantError("bucketed policy needs bucket_size")
        if self.mode == "count" and (self.count is None or self.count <= 0):
            raise QuantError("count policy needs count")

    def resolve(self, rows: int, n_heads: int, is_attention: bool) -> GroupSpec:
        """Pick the concrete grouping for one tensor.

        Per-head grouping is an attention concept; FFN and embedding
        matrices fall back to head-sized contiguous buckets so every
        tensor in a layer sees comparably sized groups.
        """
        if self.mode == "layerwise":
            return build_group_spec(rows, 1, "layerwise")
        if self.mode == "per_head":
            if is_attention:
                return build_group_spec(rows, n_heads, "per_head")
            head_rows = max(1, math.ceil(rows / n_heads))
            return build_group_spec(rows, 1, "bucketed", bucket_size=head_rows)
        if self.mode == "bucketed":
            heads = n_heads if is_attention and rows % n_heads == 0 else 1
            return build_group_spec(rows, heads, "bucketed", bucket_size=self.bucket_size)
        size = max(1, math.ceil(rows / self.count))
        return build_group_spec(rows, 1, "bucketed", bucket_size=size)
