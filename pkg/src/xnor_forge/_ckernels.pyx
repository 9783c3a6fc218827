# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t, int8_t

cnp.import_array()

BACKEND = "cython"

cdef extern from "_popcnt.h" nogil:
    int64_t xf_count(const uint64_t* words, Py_ssize_t n)
    int64_t xf_match(const uint64_t* a, const uint64_t* b, Py_ssize_t nw, uint64_t mask)
    int xf_select()
    void xf_use_generic()

HARDWARE_POPCOUNT = bool(xf_select())


def select_popcount(hardware=True):
    """Switch between the POPCNT loops and the portable ones; returns the active choice."""
    global HARDWARE_POPCOUNT
    if hardware:
        HARDWARE_POPCOUNT = bool(xf_select())
    else:
        xf_use_generic()
        HARDWARE_POPCOUNT = False
    return HARDWARE_POPCOUNT


cdef inline uint64_t _tail_mask(Py_ssize_t nbits) nogil:
    cdef Py_ssize_t r = nbits & 63
    if r == 0:
        return <uint64_t>0xFFFFFFFFFFFFFFFF
    return ((<uint64_t>1) << r) - 1


def popcount(const uint64_t[::1] words):
    cdef int64_t total = 0
    if words.shape[0] == 0:
        return 0
    with nogil:
        total = xf_count(&words[0], words.shape[0])
    return total


def xnor_dot_matrix(const uint64_t[:, ::1] a, const uint64_t[:, ::1] b, Py_ssize_t nbits):
    cdef Py_ssize_t m = a.shape[0], k = b.shape[0], nw = a.shape[1]
    if b.shape[1] != nw:
        raise ValueError("word count mismatch")
    if nw != (nbits + 63) // 64:
        raise ValueError("nbits inconsistent with word count")
    out = np.empty((m, k), dtype=np.int64)
    cdef int64_t[:, ::1] res = out
    if nw == 0:
        out[:] = 0
        return out
    cdef uint64_t mask = _tail_mask(nbits)
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(k):
                res[i, j] = 2 * xf_match(&a[i, 0], &b[j, 0], nw, mask) - nbits
    return out


def conv_first_accumulate(const double[:, :, ::1] x, const int8_t[:, :, :, ::1] signs):
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c_in = x.shape[2]
    cdef Py_ssize_t f = signs.shape[0], kh = signs.shape[2], kw = signs.shape[3]
    if signs.shape[1] != c_in:
        raise ValueError("channel mismatch")
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than input")
    # (tap, filter) table of +/-1.0: multiplying by it is exact, so each
    # filter still sums its taps in (c, ky, kx) order, just without branches
    cdef Py_ssize_t taps = c_in * kh * kw
    table = np.ascontiguousarray(np.asarray(signs, dtype=np.float64).reshape(f, taps).T)
    cdef const double[:, ::1] sw = table
    out = np.zeros((oh, ow, f), dtype=np.float64)
    cdef double[:, :, ::1] res = out
    cdef Py_ssize_t y, xx, n, c, ky, kx, t
    cdef double v
    cdef double* acc
    with nogil:
        for y in range(oh):
            for xx in range(ow):
                acc = &res[y, xx, 0]
                t = 0
                for c in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            v = x[y + ky, xx + kx, c]
                            for n in range(f):
                                acc[n] = acc[n] + sw[t, n] * v
                            t += 1
    return out
