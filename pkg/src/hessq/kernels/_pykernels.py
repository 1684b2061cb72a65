"""Pure-numpy kernel backend.

Reference implementations of the hot quantization loops. Arithmetic is
carried out in float64 with IEEE round-half-to-even exactly like the
compiled backend, so codes and dequantized values are bit-identical
between the two.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def fake_quant_grouped(x2, starts, lo, hi, levels):
    """Clamp, encode and dequantize row-grouped data in one pass.

    ``x2`` is (rows, cols) float32/float64; rows [starts[g], starts[g+1])
    form group g with clipping range [lo[g], hi[g]]. Returns
    (codes uint16, dequantized array in x2's dtype). A degenerate range
    (hi <= lo) maps the whole group to code 0 / value lo.
    """
    x2 = np.ascontiguousarray(x2)
    starts = np.asarray(starts, dtype=np.int64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    reps = np.diff(starts)
    lo_r = np.repeat(lo, reps)[:, None]
    hi_r = np.repeat(hi, reps)[:, None]
    delta = np.where(hi > lo, (hi - lo) / (levels - 1), 0.0)
    d_r = np.repeat(delta, reps)[:, None]

    xd = x2.astype(np.float64)
    clamped = np.clip(xd, lo_r, hi_r)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = np.where(d_r > 0, (clamped - lo_r) / np.where(d_r > 0, d_r, 1.0), 0.0)
    codes = np.rint(scaled)
    deq = (d_r * codes + lo_r).astype(x2.dtype)
    return codes.astype(np.uint16), deq


def minmax_grouped(x2, starts):
    """Per-group (min, max) over row blocks of a (rows, cols) array."""
    x2 = np.ascontiguousarray(x2)
    starts = np.asarray(starts, dtype=np.int64)
    mins = np.minimum.reduceat(x2, starts[:-1], axis=0).min(axis=1)
    maxs = np.maximum.reduceat(x2, starts[:-1], axis=0).max(axis=1)
    return mins.astype(np.float64), maxs.astype(np.float64)


def integer_matmul(a_codes, b_codes):
    """Exact integer product of two uint16 code matrices in int64."""
    a = np.asarray(a_codes, dtype=np.int64)
    b = np.asarray(b_codes, dtype=np.int64)
    return a @ b
