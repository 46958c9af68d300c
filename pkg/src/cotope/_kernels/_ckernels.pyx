# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics match ``_pykernels`` exactly."""
import numpy as np


cdef inline double _kahan(const double[::1] v, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef double s = 0.0, c = 0.0, y, t
    cdef Py_ssize_t j
    for j in range(a, b):
        y = v[j] - c
        t = s + y
        c = (t - s) - y
        s = t
    return s


def kahan_sum(values):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    return _kahan(v, 0, v.shape[0])


def kahan_mean(values):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    if v.shape[0] == 0:
        raise ValueError("mean of empty array")
    return _kahan(v, 0, v.shape[0]) / v.shape[0]


def nested_means(values, step_offsets, episode_offsets):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const long long[::1] so = np.ascontiguousarray(step_offsets, dtype=np.int64)
    cdef const long long[::1] eo = np.ascontiguousarray(episode_offsets, dtype=np.int64)
    cdef Py_ssize_t n = eo.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, t
    cdef double s, c, y, tt, m
    with nogil:
        for i in range(n):
            s = 0.0
            c = 0.0
            for t in range(eo[i], eo[i + 1]):
                m = _kahan(v, so[t], so[t + 1]) / (so[t + 1] - so[t])
                y = m - c
                tt = s + y
                c = (tt - s) - y
                s = tt
            o[i] = s / (eo[i + 1] - eo[i])
    return out


cdef inline Py_ssize_t _search(const double[:, ::1] cdf, Py_ssize_t row, double u, Py_ssize_t n) noexcept nogil:
    # first index with cdf > u (bisect_right), clamped to the last token
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cdf[row, mid]:
            hi = mid
        else:
            lo = mid + 1
    if lo > n - 1:
        lo = n - 1
    return lo


def sample_tokens(init_codes, mask, ep_offsets, uniforms, entity_rows, entity_cdf,
                  context_rows, context_cdf, long long vocab_size, long long key_mod):
    cdef const long long[::1] init = np.ascontiguousarray(init_codes, dtype=np.int64)
    cdef const unsigned char[::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const long long[::1] eo = np.ascontiguousarray(ep_offsets, dtype=np.int64)
    cdef const double[::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef const long long[::1] er = np.ascontiguousarray(entity_rows, dtype=np.int64)
    cdef const long long[::1] cr = np.ascontiguousarray(context_rows, dtype=np.int64)
    cdef const double[:, ::1] ecdf = np.ascontiguousarray(entity_cdf, dtype=np.float64)
    cdef const double[:, ::1] ccdf = np.ascontiguousarray(context_cdf, dtype=np.float64)
    cdef Py_ssize_t total = m.shape[0]
    tokens = np.empty(total, dtype=np.int64)
    codes = np.empty(total, dtype=np.int64)
    cdef long long[::1] tk = tokens
    cdef long long[::1] cd = codes
    cdef Py_ssize_t i, p, tok
    cdef long long code
    with nogil:
        for i in range(eo.shape[0] - 1):
            code = init[i]
            for p in range(eo[i], eo[i + 1]):
                if m[p]:
                    tok = _search(ecdf, er[code], u[p], vocab_size)
                else:
                    tok = _search(ccdf, cr[code], u[p], vocab_size)
                tk[p] = tok
                cd[p] = code
                code = (code * vocab_size + tok) % key_mod
    return tokens, codes
