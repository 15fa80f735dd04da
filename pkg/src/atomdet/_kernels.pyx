# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled reconstruction kernels (hot per-site loops).

Must stay operation-compatible with _kernels_py: float32 products are rounded
once, then summed through the same pairwise reduction tree. Built with
-ffp-contract=off so the compiler cannot fuse the multiply into the adds.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _next_pow2(Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t p = 1
    while p < n:
        p <<= 1
    return p


cdef float _tree_reduce(float* buf, Py_ssize_t padded) noexcept nogil:
    # pairwise fold, identical order to the numpy a[0::2] + a[1::2] loop
    cdef Py_ssize_t m = padded
    cdef Py_ssize_t i
    while m > 1:
        for i in range(m >> 1):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        m >>= 1
    return buf[0]


def tree_sum32(values):
    """Fixed-order float32 tree sum of a vector (zero-padded to a power of two)."""
    v = np.ascontiguousarray(values, dtype=np.float32)
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t padded = _next_pow2(max(n, 1))
    buf = np.zeros(padded, dtype=np.float32)
    buf[:n] = v
    cdef float[::1] bv = buf
    cdef float res
    with nogil:
        res = _tree_reduce(&bv[0], padded)
    return np.float32(res)


def emissions_raw(const double[:, ::1] image,
                  const cnp.int64_t[:, ::1] corners,
                  const double[:, :, ::1] weights,
                  double background,
                  bint subtract,
                  double[::1] out,
                  Py_ssize_t start,
                  Py_ssize_t stop):
    """out[i] = sum(weights_i * (window_i - b)) for sites in [start, stop)."""
    cdef Py_ssize_t k = weights.shape[1]
    cdef bint shared = weights.shape[0] == 1
    cdef Py_ssize_t i, r, c, wi, y0, x0
    cdef double acc, d
    with nogil:
        for i in range(start, stop):
            y0 = corners[i, 0]
            x0 = corners[i, 1]
            wi = 0 if shared else i
            acc = 0.0
            for r in range(k):
                for c in range(k):
                    d = image[y0 + r, x0 + c]
                    if subtract:
                        d = d - background
                    acc = acc + weights[wi, r, c] * d
            out[i] = acc


def dataflow_emissions(const double[:, ::1] image,
                       const cnp.int64_t[:, ::1] corners,
                       const double[:, :, ::1] weights,
                       float[::1] out_product,
                       float[::1] out_matrix):
    """Lane-structured float32 emulation of the accelerator's convolution stage."""
    cdef Py_ssize_t k = weights.shape[1]
    cdef Py_ssize_t padded = _next_pow2(k)
    cdef Py_ssize_t n = corners.shape[0]
    cdef bint shared = weights.shape[0] == 1
    row_buf = np.zeros(padded, dtype=np.float32)
    lane_p = np.zeros(padded, dtype=np.float32)
    lane_m = np.zeros(padded, dtype=np.float32)
    cdef float[::1] rowv = row_buf
    cdef float[::1] lpv = lane_p
    cdef float[::1] lmv = lane_m
    cdef Py_ssize_t i, r, c, wi, y0, x0
    cdef float dpx, wpx
    with nogil:
        for i in range(n):
            y0 = corners[i, 0]
            x0 = corners[i, 1]
            wi = 0 if shared else i
            for r in range(k):
                for c in range(k):
                    wpx = <float> weights[wi, r, c]
                    dpx = <float> image[y0 + r, x0 + c]
                    rowv[c] = wpx * dpx
                for c in range(k, padded):
                    rowv[c] = 0.0
                lpv[r] = _tree_reduce(&rowv[0], padded)
                for c in range(k):
                    rowv[c] = <float> weights[wi, r, c]
                for c in range(k, padded):
                    rowv[c] = 0.0
                lmv[r] = _tree_reduce(&rowv[0], padded)
            for r in range(k, padded):
                lpv[r] = 0.0
                lmv[r] = 0.0
            out_product[i] = _tree_reduce(&lpv[0], padded)
            out_matrix[i] = _tree_reduce(&lmv[0], padded)
