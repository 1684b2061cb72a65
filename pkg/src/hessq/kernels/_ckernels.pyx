# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Same contract as _pykernels: float64 internal math, IEEE round-half-to-even
(C rint under the default rounding mode), so results match the numpy
fallback bit for bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport rint

cnp.import_array()

BACKEND = "compiled"

ctypedef fused real_t:
    float
    double


def _fake_quant_grouped_impl(real_t[:, ::1] x, cnp.int64_t[::1] starts,
                             double[::1] lo, double[::1] hi, int levels,
                             cnp.uint16_t[:, ::1] codes, real_t[:, ::1] out):
    cdef Py_ssize_t g, r, c
    cdef Py_ssize_t ngroups = lo.shape[0]
    cdef Py_ssize_t cols = x.shape[1]
    cdef double q0, qm, delta, v, code
    for g in range(ngroups):
        q0 = lo[g]
        qm = hi[g]
        if qm > q0:
            delta = (qm - q0) / (levels - 1)
        else:
            delta = 0.0
        for r in range(starts[g], starts[g + 1]):
            for c in range(cols):
                v = <double> x[r, c]
                if v < q0:
                    v = q0
                elif v > qm:
                    v = qm
                if delta > 0:
                    code = rint((v - q0) / delta)
                else:
                    code = 0.0
                codes[r, c] = <cnp.uint16_t> code
                out[r, c] = <real_t> (delta * code + q0)


def fake_quant_grouped(x2, starts, lo, hi, levels):
    x2 = np.ascontiguousarray(x2)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    codes = np.empty(x2.shape, dtype=np.uint16)
    out = np.empty_like(x2)
    _fake_quant_grouped_impl(x2, starts, lo, hi, levels, codes, out)
    return codes, out


def _minmax_grouped_impl(real_t[:, ::1] x, cnp.int64_t[::1] starts,
                         double[::1] mins, double[::1] maxs):
    cdef Py_ssize_t g, r, c
    cdef Py_ssize_t ngroups = mins.shape[0]
    cdef Py_ssize_t cols = x.shape[1]
    cdef double lo, hi, v
    for g in range(ngroups):
        lo = <double> x[starts[g], 0]
        hi = lo
        for r in range(starts[g], starts[g + 1]):
            for c in range(cols):
                v = <double> x[r, c]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
        mins[g] = lo
        maxs[g] = hi


def minmax_grouped(x2, starts):
    x2 = np.ascontiguousarray(x2)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ngroups = len(starts) - 1
    mins = np.empty(ngroups, dtype=np.float64)
    maxs = np.empty(ngroups, dtype=np.float64)
    _minmax_grouped_impl(x2, starts, mins, maxs)
    return mins, maxs


def _integer_matmul_impl(cnp.uint16_t[:, ::1] a, cnp.uint16_t[:, ::1] b,
                         cnp.int64_t[:, ::1] out):
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t inner = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef cnp.int64_t acc
    for i in range(m):
        for j in range(n):
            acc = 0
            for k in range(inner):
                acc += (<cnp.int64_t> a[i, k]) * (<cnp.int64_t> b[k, j])
            out[i, j] = acc


def integer_matmul(a_codes, b_codes):
    a = np.ascontiguousarray(a_codes, dtype=np.uint16)
    b = np.ascontiguousarray(b_codes, dtype=np.uint16)
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.int64)
    _integer_matmul_impl(a, b, out)
    return out
