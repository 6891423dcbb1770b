# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""XOR + popcount scans over packed binary codes."""
import numpy as np

from libc.stdint cimport int32_t, uint8_t, uint64_t
from libc.string cimport memcpy


cdef extern from *:
    """
    #if defined(_MSC_VER)
    #include <intrin.h>
    #define SEQHASH_POPCNT64(x) ((int)__popcnt64(x))
    #else
    #define SEQHASH_POPCNT64(x) __builtin_popcountll(x)
    #endif
    """
    int SEQHASH_POPCNT64(unsigned long long x) nogil


cdef inline int32_t _distance(const uint8_t* a, const uint8_t* b, Py_ssize_t nbytes) noexcept nogil:
    cdef Py_ssize_t k = 0
    cdef uint64_t wa, wb
    cdef int32_t total = 0
    while k + 8 <= nbytes:
        memcpy(&wa, a + k, 8)
        memcpy(&wb, b + k, 8)
        total += SEQHASH_POPCNT64(wa ^ wb)
        k += 8
    while k < nbytes:
        total += SEQHASH_POPCNT64(<uint64_t>(a[k] ^ b[k]))
        k += 1
    return total


def hamming_scan(const uint8_t[:, ::1] db, const uint8_t[::1] query):
    """Distances from one packed query to every packed database row."""
    cdef Py_ssize_t n = db.shape[0]
    cdef Py_ssize_t nbytes = db.shape[1]
    if query.shape[0] != nbytes:
        raise ValueError(f"query has {query.shape[0]} bytes, database rows have {nbytes}")
    out = np.empty(n, dtype=np.int32)
    cdef int32_t[::1] o = out
    cdef Py_ssize_t i
    if n == 0:
        return out
    with nogil:
        for i in range(n):
            o[i] = _distance(&db[i, 0], &query[0], nbytes)
    return out


def hamming_matrix(const uint8_t[:, ::1] queries, const uint8_t[:, ::1] db):
    """All-pairs distance matrix, shape ``(len(queries), len(db))``."""
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t n = db.shape[0]
    cdef Py_ssize_t nbytes = db.shape[1]
    if queries.shape[1] != nbytes:
        raise ValueError(f"queries have {queries.shape[1]} bytes, database rows have {nbytes}")
    out = np.empty((nq, n), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    cdef Py_ssize_t q, i
    if nq == 0 or n == 0:
        return out
    with nogil:
        for q in range(nq):
            for i in range(n):
                o[q, i] = _distance(&db[i, 0], &queries[q, 0], nbytes)
    return out
