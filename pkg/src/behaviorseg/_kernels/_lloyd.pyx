# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for Lloyd's algorithm.

Squared distances are accumulated coordinate by coordinate in input order, and
ties between centroids resolve to the lowest index.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def assign_labels(const double[:, ::1] X, const double[:, ::1] C):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], k = C.shape[0]
    cdef Py_ssize_t i, j, d, best
    cdef double acc, diff, best_d
    labels_arr = np.empty(n, dtype=np.int64)
    d2_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] d2 = d2_arr
    with nogil:
        for i in range(n):
            best = 0
            best_d = 0.0
            for j in range(k):
                acc = 0.0
                for d in range(p):
                    diff = X[i, d] - C[j, d]
                    acc = acc + diff * diff
                if j == 0 or acc < best_d:
                    best_d = acc
                    best = j
            labels[i] = best
            d2[i] = best_d
    return labels_arr, d2_arr


def centroid_sums(const double[:, ::1] X, const cnp.int64_t[::1] labels, Py_ssize_t k):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef Py_ssize_t i, d, c
    sums_arr = np.zeros((k, p), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    with nogil:
        for i in range(n):
            c = labels[i]
            counts[c] += 1
            for d in range(p):
                sums[c, d] += X[i, d]
    return sums_arr, counts_arr


def update_min_sq_dist(const double[:, ::1] X, const double[::1] c, double[::1] d2):
    """In place: d2[i] = min(d2[i], ||X[i] - c||^2)."""
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef Py_ssize_t i, d
    cdef double acc, diff
    with nogil:
        for i in range(n):
            acc = 0.0
            for d in range(p):
                diff = X[i, d] - c[d]
                acc = acc + diff * diff
            if acc < d2[i]:
                d2[i] = acc


cdef inline double _sq_to_mean(const double[:, ::1] X, Py_ssize_t i,
                               double[:, ::1] sums, double[::1] counts, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t d
    cdef double acc = 0.0, diff
    for d in range(X.shape[1]):
        diff = X[i, d] - sums[j, d] / counts[j]
        acc = acc + diff * diff
    return acc


def hartigan_pass(const double[:, ::1] X, cnp.int64_t[::1] labels, double[:, ::1] sums, double[::1] counts):
    """One pass of WCSS-lowering single-point transfers, in place.

    Points are screened against the centroids at the start of the pass, then
    the candidates are moved in index order, each re-checked against the
    current centroids. Returns the number of moves.
    """
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], k = sums.shape[0]
    cdef Py_ssize_t i, j, d, a, b, moves = 0
    cdef double rem, cost, best
    snap_sums_arr = np.array(sums, copy=True)
    cand_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] snap = snap_sums_arr
    cdef double[::1] snap_counts = np.array(counts, copy=True)
    cdef cnp.uint8_t[::1] cand = cand_arr
    with nogil:
        for i in range(n):
            a = labels[i]
            if snap_counts[a] <= 1:
                continue
            rem = snap_counts[a] / (snap_counts[a] - 1.0) * _sq_to_mean(X, i, snap, snap_counts, a)
            best = INFINITY
            for j in range(k):
                if j != a:
                    cost = snap_counts[j] / (snap_counts[j] + 1.0) * _sq_to_mean(X, i, snap, snap_counts, j)
                    if cost < best:
                        best = cost
            if rem - best > 1e-12 * rem:
                cand[i] = 1
        for i in range(n):
            if not cand[i]:
                continue
            a = labels[i]
            if counts[a] <= 1:
                continue
            rem = counts[a] / (counts[a] - 1.0) * _sq_to_mean(X, i, sums, counts, a)
            best = INFINITY
            b = -1
            for j in range(k):
                if j != a:
                    cost = counts[j] / (counts[j] + 1.0) * _sq_to_mean(X, i, sums, counts, j)
                    if cost < best:
                        best = cost
                        b = j
            if b >= 0 and best < rem * (1 - 1e-12):
                for d in range(p):
                    sums[a, d] -= X[i, d]
                    sums[b, d] += X[i, d]
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moves += 1
    return moves
