# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of ``_pykernels``; same arithmetic order, same results."""

import numpy as np
from libc.stdlib cimport malloc, free as cfree


cdef inline void _step(double* level, double* trend, double* s_io, double y,
                       double alpha, double beta, double gamma,
                       bint tes, bint on_level) noexcept nogil:
    cdef double s_old = s_io[0]
    cdef double new_level, new_trend
    if tes:
        new_level = alpha * (y - s_old) + (1.0 - alpha) * (level[0] + trend[0])
    else:
        new_level = alpha * y + (1.0 - alpha) * (level[0] + trend[0])
    new_trend = beta * (new_level - level[0]) + (1.0 - beta) * trend[0]
    if tes:
        if on_level:
            s_io[0] = gamma * (y - new_level) + (1.0 - gamma) * s_old
        else:
            s_io[0] = gamma * (y - new_trend) + (1.0 - gamma) * s_old
    level[0] = new_level
    trend[0] = new_trend


def smooth_step(double level, double trend, double s_old, double y,
                double alpha, double beta, double gamma, bint tes, bint on_level):
    _step(&level, &trend, &s_old, y, alpha, beta, gamma, tes, on_level)
    return level, trend, s_old


def smooth_replay(values, double level, double trend, season,
                  double alpha, double beta, double gamma, bint tes, bint on_level):
    cdef double[::1] vals = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] ring = np.array(season, dtype=np.float64)
    cdef Py_ssize_t n = vals.shape[0], s = ring.shape[0], pos = 0, i
    cdef double zero = 0.0
    with nogil:
        for i in range(n):
            if tes:
                _step(&level, &trend, &ring[pos], vals[i], alpha, beta, gamma, tes, on_level)
                pos = (pos + 1) % s
            else:
                zero = 0.0
                _step(&level, &trend, &zero, vals[i], alpha, beta, gamma, tes, on_level)
    if tes:
        arr = np.asarray(ring)
        out = np.concatenate([arr[pos:], arr[:pos]])
    else:
        out = np.zeros(0)
    return level, trend, out


def smooth_forecasts(values, double level, double trend, season,
                     double alpha, double beta, double gamma, bint tes, bint on_level,
                     Py_ssize_t k, bint online):
    cdef double[::1] vals = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] ring = np.array(season, dtype=np.float64)
    cdef Py_ssize_t n = vals.shape[0], s = ring.shape[0], pos = 0, i, lead
    cdef Py_ssize_t cursor = -1
    cdef double f, zero
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            if online:
                while cursor < i - k:
                    cursor += 1
                    if tes:
                        _step(&level, &trend, &ring[pos], vals[cursor], alpha, beta, gamma, tes, on_level)
                        pos = (pos + 1) % s
                    else:
                        zero = 0.0
                        _step(&level, &trend, &zero, vals[cursor], alpha, beta, gamma, tes, on_level)
            lead = i - cursor
            f = level + lead * trend
            if tes:
                f = f + ring[(pos + lead - 1) % s]
            out[i] = f if f > 0.0 else 0.0
    return out_arr


cdef inline void _sift_down(double* heap, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t i = 0, child
    cdef double tmp
    while True:
        child = 2 * i + 1
        if child >= size:
            break
        if child + 1 < size and heap[child + 1] < heap[child]:
            child += 1
        if heap[child] < heap[i]:
            tmp = heap[i]
            heap[i] = heap[child]
            heap[child] = tmp
            i = child
        else:
            break


def mmc_sojourn(arrivals, services, Py_ssize_t c):
    cdef double[::1] arr = np.ascontiguousarray(arrivals, dtype=np.float64)
    cdef double[::1] svc = np.ascontiguousarray(services, dtype=np.float64)
    cdef Py_ssize_t n = arr.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double a, f, start, done
    cdef double* heap = <double*> malloc(c * sizeof(double))
    if heap == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(c):
                heap[i] = 0.0
            for i in range(n):
                a = arr[i]
                f = heap[0]
                start = a if a > f else f
                done = start + svc[i]
                # replace the root (earliest free server) and restore heap order
                heap[0] = done
                _sift_down(heap, c)
                out[i] = done - a
    finally:
        cfree(heap)
    return out_arr
