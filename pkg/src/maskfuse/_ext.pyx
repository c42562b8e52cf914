# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled mask kernels.

Every function here has a twin with the same signature in ``_pure.py``; the
two must agree bit-for-bit.  Inputs are validated by the callers in
``masks.py`` / ``coco_io.py``, so these loops trust their arguments.
"""
import numpy as np

from libc.stdint cimport int64_t, uint8_t, uint64_t
from libc.string cimport memcpy, memset

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def rle_encode(const uint8_t[::1] flat):
    """Run lengths of a column-major flattened 0/1 mask, zero-run first."""
    cdef Py_ssize_t n = flat.shape[0]
    cdef Py_ssize_t i = 0, start = 0, nruns = 0
    cdef uint8_t cur = 0
    cdef uint64_t word, same
    out = np.empty(n + 1, dtype=np.int64)
    cdef int64_t[::1] counts = out
    with nogil:
        while i < n:
            # skip eight pixels at a time while they all continue the current run
            same = 0x0101010101010101 if cur else 0
            while i + 8 <= n:
                memcpy(&word, &flat[i], 8)
                if word != same:
                    break
                i += 8
            while i < n and (flat[i] != 0) == cur:
                i += 1
            if i < n:
                counts[nruns] = i - start
                nruns += 1
                start = i
                cur ^= 1
        counts[nruns] = n - start
        nruns += 1
    return out[:nruns].copy()


def rle_decode(const int64_t[::1] counts, Py_ssize_t n):
    """Expand run lengths into a flat uint8 column-major buffer of length ``n``."""
    out = np.zeros(n, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    cdef Py_ssize_t k, pos = 0
    cdef int64_t c
    cdef int val = 0
    with nogil:
        for k in range(counts.shape[0]):
            c = counts[k]
            if val and c > 0:
                memset(&o[pos], 1, <size_t>c)
            pos += c
            val ^= 1
    return out


def rle_to_string(const int64_t[::1] counts):
    """COCO compressed counts: 5-bit groups, delta against the run two back."""
    cdef Py_ssize_t m = counts.shape[0]
    cdef Py_ssize_t i, p = 0
    cdef int64_t x
    cdef int c, more
    buf = bytearray(m * 14 + 1)
    cdef unsigned char[::1] s = buf
    with nogil:
        for i in range(m):
            x = counts[i]
            if i > 2:
                x -= counts[i - 2]
            more = 1
            while more:
                c = <int>(x & 0x1f)
                x >>= 5
                if c & 0x10:
                    more = x != -1
                else:
                    more = x != 0
                if more:
                    c |= 0x20
                s[p] = <unsigned char>(c + 48)
                p += 1
    return bytes(buf[:p])


def rle_from_string(const unsigned char[::1] s):
    """Inverse of :func:`rle_to_string`; raises ``ValueError`` on bad bytes."""
    cdef Py_ssize_t n = s.shape[0]
    cdef Py_ssize_t p = 0, m = 0
    cdef int64_t x
    cdef int c, k, more
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] cnts = out
    while p < n:
        x = 0
        k = 0
        more = 1
        while more:
            if p >= n:
                raise ValueError("truncated RLE string")
            c = <int>s[p] - 48
            if c < 0 or c > 63:
                raise ValueError(f"invalid RLE character at offset {p}")
            if k > 12:
                raise ValueError(f"RLE value overflow at offset {p}")
            x |= (<int64_t>(c & 0x1f)) << (5 * k)
            more = c & 0x20
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= (<int64_t>-1) << (5 * k)
        if m > 2:
            x += cnts[m - 2]
        cnts[m] = x
        m += 1
    return out[:m].copy()


def pairwise_intersections(const uint64_t[:, ::1] packed):
    """Symmetric matrix of shared set pixels between every pair of packed masks."""
    cdef Py_ssize_t n = packed.shape[0], w = packed.shape[1]
    cdef Py_ssize_t i, j, k
    cdef int64_t acc
    out = np.zeros((n, n), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(i, n):
                acc = 0
                for k in range(w):
                    acc += __builtin_popcountll(packed[i, k] & packed[j, k])
                o[i, j] = acc
                o[j, i] = acc
    return out


def cross_intersections(const uint64_t[:, ::1] a, const uint64_t[:, ::1] b):
    """Shared set pixels between each row of ``a`` and each row of ``b``."""
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], w = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef int64_t acc
    out = np.zeros((na, nb), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    with nogil:
        for i in range(na):
            for j in range(nb):
                acc = 0
                for k in range(w):
                    acc += __builtin_popcountll(a[i, k] & b[j, k])
                o[i, j] = acc
    return out


def popcounts(const uint64_t[:, ::1] packed):
    """Set-pixel count of every packed mask row."""
    cdef Py_ssize_t n = packed.shape[0], w = packed.shape[1]
    cdef Py_ssize_t i, k
    cdef int64_t acc
    out = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0
            for k in range(w):
                acc += __builtin_popcountll(packed[i, k])
            o[i] = acc
    return out
