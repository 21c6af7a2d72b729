# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every function works on a C-contiguous 2-D float64 view whose last axis is
the "row"; callers reshape batched arrays before dispatching here.  The pure
numpy twin lives in :mod:`hopattn._pykernels` and must stay numerically
interchangeable with this module (see tests/test_backends.py).
"""

import numpy as np

from libc.math cimport exp, tanh, sqrt, fabs


def softmax_rows(const double[:, ::1] a, Py_ssize_t block=0):
    """Row softmax.  ``block > 0`` applies a causal mask: row ``r`` only
    sees columns ``0 .. r % block``; masked entries are exactly zero."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t r, j, lim
    cdef double mx, s, inv
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            lim = m if block == 0 else (r % block) + 1
            if lim > m:
                lim = m
            mx = a[r, 0]
            for j in range(1, lim):
                if a[r, j] > mx:
                    mx = a[r, j]
            s = 0.0
            for j in range(lim):
                o[r, j] = exp(a[r, j] - mx)
                s = s + o[r, j]
            inv = 1.0 / s
            for j in range(lim):
                o[r, j] = o[r, j] * inv
    return out


def softmax_rows_backward(const double[:, ::1] p, const double[:, ::1] g):
    """Vector-Jacobian product of the row softmax: p * (g - <p, g>)."""
    cdef Py_ssize_t n = p.shape[0], m = p.shape[1]
    cdef Py_ssize_t r, j
    cdef double dot
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            dot = 0.0
            for j in range(m):
                dot = dot + p[r, j] * g[r, j]
            for j in range(m):
                o[r, j] = p[r, j] * (g[r, j] - dot)
    return out


cdef double _GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double _GELU_K = 0.044715


def gelu(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double v
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            for j in range(m):
                v = x[r, j]
                o[r, j] = 0.5 * v * (1.0 + tanh(_GELU_C * (v + _GELU_K * v * v * v)))
    return out


def gelu_backward(const double[:, ::1] x, const double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double v, t, dt
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            for j in range(m):
                v = x[r, j]
                t = tanh(_GELU_C * (v + _GELU_K * v * v * v))
                dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * v * v)
                o[r, j] = g[r, j] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


def layer_norm(const double[:, ::1] x, double eps):
    """Affine-free layer norm.  Returns ``(y, rstd)`` with ``rstd`` shaped (n,)."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double mu, var, d, rs
    out = np.empty((n, m), dtype=np.float64)
    rstd = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] rv = rstd
    with nogil:
        for r in range(n):
            mu = 0.0
            for j in range(m):
                mu = mu + x[r, j]
            mu = mu / m
            var = 0.0
            for j in range(m):
                d = x[r, j] - mu
                var = var + d * d
            rs = 1.0 / sqrt(var / m + eps)
            rv[r] = rs
            for j in range(m):
                o[r, j] = (x[r, j] - mu) * rs
    return out, rstd


def layer_norm_backward(const double[:, ::1] y, const double[::1] rstd,
                        const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1]
    cdef Py_ssize_t r, j
    cdef double mg, mgy
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            mg = 0.0
            mgy = 0.0
            for j in range(m):
                mg = mg + g[r, j]
                mgy = mgy + g[r, j] * y[r, j]
            mg = mg / m
            mgy = mgy / m
            for j in range(m):
                o[r, j] = rstd[r] * (g[r, j] - mg - y[r, j] * mgy)
    return out


def ema(const double[:, ::1] prev, const double[:, ::1] new, double keep):
    """keep * prev + (1 - keep) * new, elementwise."""
    cdef Py_ssize_t n = prev.shape[0], m = prev.shape[1]
    cdef Py_ssize_t r, j
    cdef double mix = 1.0 - keep
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            for j in range(m):
                o[r, j] = keep * prev[r, j] + mix * new[r, j]
    return out


def norm_one(const double[:, ::1] a):
    """Max column absolute sum."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t r, j
    cdef double best = 0.0
    col = np.zeros(m, dtype=np.float64)
    cdef double[::1] c = col
    with nogil:
        for r in range(n):
            for j in range(m):
                c[j] = c[j] + fabs(a[r, j])
        for j in range(m):
            if c[j] > best:
                best = c[j]
    return best


def norm_inf(const double[:, ::1] a):
    """Max row absolute sum."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t r, j
    cdef double best = 0.0, s
    with nogil:
        for r in range(n):
            s = 0.0
            for j in range(m):
                s = s + fabs(a[r, j])
            if s > best:
                best = s
    return best
