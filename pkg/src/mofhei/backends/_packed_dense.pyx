# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel for packed dense-task execution.

Runs a contiguous range of output-unit tasks of one layer program over the
slot matrix: per task, ciphertext-plaintext multiplies for every nonzero
weight, a sequential accumulation chain, and a bias add, with zero-weight
terms skipped and counted. Must stay semantically identical to
``mofhei.backends.pure.run_dense_tasks``; the build disables FP contraction
so the two agree bit for bit.
"""

from libc.stdint cimport int32_t, int64_t


def run_dense_tasks(double[:, ::1] in_slots, int64_t[::1] in_levels, int64_t pad_level,
                    int32_t[:, ::1] idx, double[:, ::1] weights, double[::1] bias,
                    double[:, ::1] out_slots, int64_t[::1] out_levels,
                    int64_t[::1] counts, Py_ssize_t lo, Py_ssize_t hi):
    """Execute tasks [lo, hi); returns -1 or the index of a depth-starved task.

    counts layout: [ct_pt_mul, ct_ct_mul, ct_add, ct_pt_add, skipped_mul,
    skipped_add], incremented in place.
    """
    cdef Py_ssize_t n_slots = in_slots.shape[1]
    cdef Py_ssize_t m = idx.shape[1]
    cdef Py_ssize_t q, r, s, used
    cdef int64_t lev, minlev
    cdef int32_t i
    cdef double w, bv
    cdef int64_t c_mul = 0, c_add = 0, c_bias = 0, c_skip_mul = 0, c_skip_add = 0
    cdef Py_ssize_t bad = -1

    with nogil:
        for q in range(lo, hi):
            used = 0
            minlev = pad_level
            for r in range(m):
                w = weights[q, r]
                if w == 0.0:
                    c_skip_mul += 1
                    continue
                i = idx[q, r]
                lev = pad_level if i < 0 else in_levels[i]
                if lev < 1:
                    bad = q
                    break
                if lev < minlev:
                    minlev = lev
                if i >= 0:
                    if used == 0:
                        for s in range(n_slots):
                            out_slots[q, s] = w * in_slots[i, s]
                    else:
                        for s in range(n_slots):
                            out_slots[q, s] = out_slots[q, s] + w * in_slots[i, s]
                # a padding reference multiplies an encrypted zero: executed,
                # but contributes nothing to the accumulator
                c_mul += 1
                used += 1
            if bad >= 0:
                break
            if used > 0:
                c_add += used - 1
                c_skip_add += (m - 1) - (used - 1)
                out_levels[q] = minlev - 1
            else:
                c_skip_add += m - 1
                out_levels[q] = pad_level
            bv = bias[q]
            if bv != 0.0:
                for s in range(n_slots):
                    out_slots[q, s] = out_slots[q, s] + bv
                c_bias += 1
            else:
                c_skip_add += 1

    counts[0] += c_mul
    counts[2] += c_add
    counts[3] += c_bias
    counts[4] += c_skip_mul
    counts[5] += c_skip_add
    return bad
