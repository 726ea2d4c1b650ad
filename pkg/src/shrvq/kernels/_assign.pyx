# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled nearest-codeword search kernels.

Distances are squared Euclidean, accumulated in double precision over
float32 inputs; ties resolve to the smallest codeword index. Residual
updates are performed in float32 so they match the float32 arithmetic of
the surrounding training code exactly.
"""

from libc.stdint cimport int64_t


def assign_nearest(const float[:, ::1] points, const float[:, ::1] codebook,
                   int64_t[::1] out):
    """Write the index of the nearest codeword for each point into ``out``."""
    cdef Py_ssize_t P = points.shape[0]
    cdef Py_ssize_t D = points.shape[1]
    cdef Py_ssize_t M = codebook.shape[0]
    cdef Py_ssize_t p, m, k, best_m
    cdef double best, acc, diff
    for p in range(P):
        best = -1.0
        best_m = 0
        for m in range(M):
            acc = 0.0
            for k in range(D):
                diff = <double> points[p, k] - <double> codebook[m, k]
                acc += diff * diff
            if best < 0.0 or acc < best:
                best = acc
                best_m = m
        out[p] = best_m


def assign_step(float[:, ::1] residuals, const float[:, :, ::1] books,
                const int64_t[::1] bank, int64_t[::1] codes):
    """One hierarchy step: search the per-position codebook, subtract the winner.

    ``books`` stacks all codebooks of one layer as (num_books, M, D);
    ``bank[p]`` selects the codebook for position ``p``. The winning index
    goes to ``codes[p]`` and its codeword is subtracted from
    ``residuals[p]`` in place (float32).
    """
    cdef Py_ssize_t P = residuals.shape[0]
    cdef Py_ssize_t D = residuals.shape[1]
    cdef Py_ssize_t M = books.shape[1]
    cdef Py_ssize_t p, m, k, best_m
    cdef int64_t b
    cdef double best, acc, diff
    for p in range(P):
        b = bank[p]
        best = -1.0
        best_m = 0
        for m in range(M):
            acc = 0.0
            for k in range(D):
                diff = <double> residuals[p, k] - <double> books[b, m, k]
                acc += diff * diff
            if best < 0.0 or acc < best:
                best = acc
                best_m = m
        codes[p] = best_m
        for k in range(D):
            residuals[p, k] = residuals[p, k] - books[b, best_m, k]
