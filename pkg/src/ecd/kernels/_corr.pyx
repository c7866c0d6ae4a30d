# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled sliding-window correlation kernels (the pipeline's hot loop).

Accumulation is always double precision so the compiled and numpy backends
agree to rounding error and argmax selections are stable across backends.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def correlate_valid_f32(const float[:, :, ::1] ref, const float[:, :, ::1] patch):
    cdef Py_ssize_t d = ref.shape[0], H = ref.shape[1], W = ref.shape[2]
    cdef Py_ssize_t h = patch.shape[1], w = patch.shape[2]
    cdef Py_ssize_t oh = H - h + 1, ow = W - w + 1
    out_arr = np.zeros((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, c, a, b
    cdef double acc
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for c in range(d):
                for a in range(h):
                    for b in range(w):
                        acc += <double>ref[c, i + a, j + b] * <double>patch[c, a, b]
            out[i, j] = acc
    return out_arr


def correlate_valid_f64(const double[:, :, ::1] ref, const double[:, :, ::1] patch):
    cdef Py_ssize_t d = ref.shape[0], H = ref.shape[1], W = ref.shape[2]
    cdef Py_ssize_t h = patch.shape[1], w = patch.shape[2]
    cdef Py_ssize_t oh = H - h + 1, ow = W - w + 1
    out_arr = np.zeros((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, c, a, b
    cdef double acc
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for c in range(d):
                for a in range(h):
                    for b in range(w):
                        acc += ref[c, i + a, j + b] * patch[c, a, b]
            out[i, j] = acc
    return out_arr


def best_match_f32(const float[:, :, :, ::1] refs, const float[:, :, ::1] patch):
    """Argmax over (k, top, left); ties go to lowest k, then raster order."""
    cdef Py_ssize_t K = refs.shape[0], d = refs.shape[1]
    cdef Py_ssize_t H = refs.shape[2], W = refs.shape[3]
    cdef Py_ssize_t h = patch.shape[1], w = patch.shape[2]
    cdef Py_ssize_t oh = H - h + 1, ow = W - w + 1
    cdef Py_ssize_t k, i, j, c, a, b
    cdef Py_ssize_t bk = -1, bi = -1, bj = -1
    cdef double acc
    cdef double best = -1e300
    for k in range(K):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(d):
                    for a in range(h):
                        for b in range(w):
                            acc += <double>refs[k, c, i + a, j + b] * <double>patch[c, a, b]
                if acc > best:
                    best = acc
                    bk = k
                    bi = i
                    bj = j
    return bk, bi, bj, best
