# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-compatible with ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t, int8_t

cnp.import_array()

BACKEND = "cython"

cdef inline int _shift_for(uint64_t modulus):
    cdef int k = 0
    cdef uint64_t m = modulus
    while m:
        k += 1
        m >>= 1
    return 64 - k


def coo_matmul_t(const int64_t[::1] rows, const int64_t[::1] cols,
                 const double[::1] vals, const double[:, ::1] xt, Py_ssize_t nrows):
    """Return ``Y^T`` (nrows x B) with ``Y = X @ W^T`` for COO ``W``; ``xt`` is ``X^T``."""
    cdef Py_ssize_t nb = xt.shape[1]
    out = np.zeros((nrows, nb), dtype=np.float64)
    cdef double[:, ::1] yt = out
    cdef Py_ssize_t e, b, r, c
    cdef double v
    with nogil:
        for e in range(vals.shape[0]):
            r = rows[e]
            c = cols[e]
            v = vals[e]
            for b in range(nb):
                yt[r, b] += v * xt[c, b]
    return out


def coo_sddmm_t(const int64_t[::1] rows, const int64_t[::1] cols,
                const double[:, ::1] dt, const double[:, ::1] xt):
    """Return ``g[e] = sum_b D[b, rows[e]] * X[b, cols[e]]`` given ``D^T`` and ``X^T``."""
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t nb = xt.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] g = out
    cdef Py_ssize_t e, b, r, c
    cdef double acc
    with nogil:
        for e in range(n):
            r = rows[e]
            c = cols[e]
            acc = 0.0
            for b in range(nb):
                acc += dt[r, b] * xt[c, b]
            g[e] = acc
    return out


cdef extern from "_prg.h" nogil:
    void ll_add_stream(uint64_t* out, Py_ssize_t n, uint64_t seed, uint64_t modulus,
                       int shift, uint64_t offset)
    void ll_sub_stream(uint64_t* out, Py_ssize_t n, uint64_t seed, uint64_t modulus,
                       int shift, uint64_t offset)


cdef inline void _accumulate(uint64_t* out, Py_ssize_t n, uint64_t seed, uint64_t modulus,
                             int shift, bint subtract, uint64_t offset) noexcept nogil:
    if subtract:
        ll_sub_stream(out, n, seed, modulus, shift, offset)
    else:
        ll_add_stream(out, n, seed, modulus, shift, offset)


def prg_fill(uint64_t seed, Py_ssize_t n, uint64_t modulus, uint64_t offset=0):
    """Counter-mode stream of ``n`` residues in ``[0, modulus)``."""
    out = np.zeros(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef int s = _shift_for(modulus)
    if n:
        with nogil:
            _accumulate(&o[0], n, seed, modulus, s, False, offset)
    return out


def prg_accumulate(uint64_t[::1] out, uint64_t seed, uint64_t modulus,
                   bint subtract, uint64_t offset=0):
    """In place: ``out = out +/- stream(seed) mod modulus``."""
    cdef int s = _shift_for(modulus)
    cdef Py_ssize_t n = out.shape[0]
    if n:
        with nogil:
            _accumulate(&out[0], n, seed, modulus, s, subtract, offset)


def prg_mask(uint64_t[::1] out, const uint64_t[::1] seeds, const int8_t[::1] signs,
             uint64_t modulus, uint64_t offset=0):
    """Apply several streams: ``out += sum_j signs[j] * stream(seeds[j])``.

    Works block by block so ``out`` stays in cache across streams.
    """
    cdef int s = _shift_for(modulus)
    cdef Py_ssize_t n = out.shape[0], k = seeds.shape[0]
    cdef Py_ssize_t lo, hi, j, block = 8192
    if n == 0:
        return
    with nogil:
        lo = 0
        while lo < n:
            hi = lo + block if lo + block < n else n
            for j in range(k):
                _accumulate(&out[lo], hi - lo, seeds[j], modulus, s, signs[j] < 0,
                            offset + <uint64_t>lo)
            lo = hi
