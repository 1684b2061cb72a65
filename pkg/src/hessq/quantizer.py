"""Uniform affine quantization primitives.

The forward map for k bits over clipping range [q0, q_max]:

    delta = (q_max - q0) / (2^k - 1)
    codes = rint((clamp(X, q0, q_max) - q0) / delta)      # half-to-even
    Q(X)  = delta * codes + q0

A degenerate range (q_max <= q0) encodes everything as code 0 and
dequantizes to q0. The backward rule is the clipped straight-through
estimator: gradients pass where q0 <= X <= q_max and are zeroed outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T

MAX_BITS = 16  # codes are stored as uint16


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """How to pick a clipping range and how many bits to spend."""

    bits: int
    range_policy: str = "minmax"  # "minmax" | "percentile"
    percentile: float | None = None

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise QuantError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if self.range_policy not in ("minmax", "percentile"):
            raise QuantError(f"unknown range policy {self.range_policy!r}")
        if self.range_policy == "percentile":
            if self.percentile is None or not 0.0 < self.percentile <= 1.0:
                raise QuantError("percentile policy needs 0 < percentile <= 1")


@dataclass(frozen=True)
class QuantRange:
    """Clipping interval plus the derived step size."""

    q0: float
    q_max: float
    delta: float

    @classmethod
    def from_bounds(cls, lo: float, hi: float, bits: int) -> "QuantRange":
        lo = float(lo)
        hi = float(hi)
        if hi > lo:
            delta = (hi - lo) / (2**bits - 1)
        else:
            hi = lo
            delta = 0.0
        return cls(lo, hi, delta)


@dataclass
class QuantizedTensor:
    """Codes plus the affine map back to real values."""

    codes: np.ndarray  # uint16, original shape
    range: QuantRange
    bits: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_range(values: np.ndarray, spec: QuantSpec) -> QuantRange:
    """Pick the clipping range for one group of values.

    minmax covers everything; percentile keeps the central ``percentile``
    mass using half-up order-statistic indexing on the sorted values, so
    ten points with p=0.8 clip at indices (1, 8).
    """
    values = np.asarray(values)
    if values.size == 0:
        raise QuantError("cannot select a range from an empty group")
    if not np.all(np.isfinite(values)):
        raise QuantError("range selection saw a non-finite value")
    if spec.range_policy == "minmax":
        return QuantRange.from_bounds(values.min(), values.max(), spec.bits)
    flat = np.sort(values.astype(np.float64, copy=False), axis=None)
    n = flat.size
    tail = (1.0 - spec.percentile) / 2.0
    lo_idx = _round_half_up(tail * (n - 1))
    hi_idx = _round_half_up((1.0 - tail) * (n - 1))
    return QuantRange.from_bounds(flat[lo_idx], flat[hi_idx], spec.bits)


def quantize_forward(x: np.ndarray, qrange: QuantRange, bits: int) -> QuantizedTensor:
    """Encode an array against a fixed range (single group)."""
    if not 1 <= bits <= MAX_BITS:
        raise QuantError(f"bits must be in [1, {MAX_BITS}], got {bits}")
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise QuantError("quantize_forward saw a non-finite value")
    codes, _ = kernels.fake_quant_grouped(
        x.reshape(1, -1),
        np.array([0, 1], dtype=np.int64),
        np.array([qrange.q0]),
        np.array([qrange.q_max]),
        2**bits,
    )
    return QuantizedTensor(codes.reshape(x.shape), qrange, bits)


def dequantize(qt: QuantizedTensor, dtype=np.float64) -> np.ndarray:
    """Exact affine expansion delta * codes + q0, computed in float64."""
    out = qt.range.delta * qt.codes.astype(np.float64) + qt.range.q0
    return out.astype(dtype)


def fake_quantize(x: np.ndarray, qrange: QuantRange, bits: int) -> np.ndarray:
    """quantize + dequantize in one fused pass, preserving x's dtype."""
    x = np.asarray(x)
    _, deq = kernels.fake_quant_grouped(
        x.reshape(1, -1),
        np.array([0, 1], dtype=np.int64),
        np.array([qrange.q0]),
        np.array([qrange.q_max]),
        2**bits,
    )
    return deq.reshape(x.shape)


def ste_backward(upstream: np.ndarray, x: np.ndarray, qrange: QuantRange) -> np.ndarray:
    """Clipped straight-through gradient: pass inside [q0, q_max], zero outside."""
    upstream = np.asarray(upstream)
    x = np.asarray(x)
    if upstream.shape != x.shape:
        raise QuantError(f"upstream shape {upstream.shape} != value shape {x.shape}")
    mask = (x >= qrange.q0) & (x <= qrange.q_max)
    return upstream * mask.astype(upstream.dtype)


def integer_matmul_sim(a: QuantizedTensor, b: QuantizedTensor) -> np.ndarray:
    """Dequantized matrix product computed entirely from integer codes.

    With A = da*Ac + a0 and B = db*Bc + b0:
      A @ B = da*db * (Ac @ Bc) + da*b0 * rowsum(Ac) + a0*db * colsum(Bc)
              + K * a0*b0
    The int64 accumulator is guarded by the analytic worst case
    K * (2^ka - 1) * (2^kb - 1) < 2^63 before the kernel runs.
    """
    if a.codes.ndim != 2 or b.codes.ndim != 2:
        raise QuantError("integer_matmul_sim expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise QuantError(f"inner dims differ: {a.shape} @ {b.shape}")
    inner = a.shape[1]
    worst = inner * (2**a.bits - 1) * (2**b.bits - 1)
    if worst >= 2**63:
        raise OverflowError(
            f"integer matmul could overflow int64: K={inner}, bits=({a.bits}, {b.bits})"
        )
    s = kernels.integer_matmul(a.codes, b.codes).astype(np.float64)
    da, a0 = a.range.delta, a.range.q0
    db, b0 = b.range.delta, b.range.q0
    rows = a.codes.astype(np.int64).sum(axis=1).astype(np.float64)
    cols = b.codes.astype(np.int64).sum(axis=0).astype(np.float64)
    return da * db * s + da * b0 * rows[:, None] + a0 * db * cols[None, :] + inner * a0 * b0


class ActivationObserver:
    """Running min/max tracker with exponential moving average (decay 0.9).

    The first batch seeds the range directly; later batches blend in with
    ``ema = decay * ema + (1 - decay) * batch``. Freeze before evaluation
    so ranges stay fixed.
    """

    def __init__(self, decay: float = 0.9):
        if not 0.0 <= decay < 1.0:
            raise QuantError("decay must be in [0, 1)")
        self.decay = decay
        self.ema_min: float | None = None
        self.ema_max: float | None = None
        self.frozen = False

    def update(self, arr: np.ndarray) -> None:
        if self.frozen:
            return
        arr = np.asarray(arr)
        if arr.size == 0:
            return
        bmin = float(arr.min())
        bmax = float(arr.max())
        if self.ema_min is None:
            self.ema_min, self.ema_max = bmin, bmax
        else:
            d = self.decay
            self.ema_min = d * self.ema_min + (1.0 - d) * bmin
            self.ema_max = d * self.ema_max + (1.0 - d) * bmax

    def freeze(self) -> None:
        self.frozen = True

    def range(self, bits: int) -> QuantRange:
        if self.ema_min is None:
            raise QuantError("observer has seen no data")
        return QuantRange.from_bounds(self.ema_min, self.ema_max, bits)

    def state(self) -> dict:
        return {"decay": self.decay, "min": self.ema_min, "max": self.ema_max}

    @classmethod
    def from_state(cls, state: dict) -> "ActivationObserver":
        obs = cls(decay=state["decay"])
        obs.ema_min = state["min"]
        obs.ema_max = state["max"]
        obs.frozen = True
        return obs


# -- graph ops ---------------------------------------------------------------


def fake_quant_node(
    x: T.Tensor,
    starts: np.ndarray,
    bits: int,
    lo: np.ndarray,
    hi: np.ndarray,
) -> T.Tensor:
    """Insert fake quantization into the autodiff graph.

    Rows of the (rows, -1) view of ``x`` are grouped by ``starts`` with
    per-group ranges [lo, hi]. Forward runs the fused kernel; backward is
    the clipped straight-through estimator (a constant in-range mask), so
    double differentiation through it is well defined and zero.
    """
    starts = np.asarray(starts, dtype=np.int64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    rows = int(starts[-1])
    x2 = x.data.reshape(rows, -1)
    _, deq = kernels.fake_quant_grouped(x2, starts, lo, hi, 2**bits)
    data = deq.reshape(x.shape)

    reps = np.diff(starts)
    lo_r = np.repeat(lo, reps)[:, None]
    hi_r = np.repeat(hi, reps)[:, None]
    mask = ((x2 >= lo_r) & (x2 <= hi_r)).astype(x.data.dtype).reshape(x.shape)

    def vjp(u: T.Tensor):
        return (T.mul(u, T.constant(mask)),)

    return T._out(data, (x,), vjp)


def fake_quant_tensorwise(x: T.Tensor, qrange: QuantRange, bits: int) -> T.Tensor:
    """Whole-tensor fake quantization against a fixed (observer) range."""
    starts = np.array([0, 1], dtype=np.int64)
    return fake_quant_node(x, starts, bits, np.array([qrange.q0]), np.array([qrange.q_max]))
