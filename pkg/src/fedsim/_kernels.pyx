# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SGD kernels. Semantics mirror fedsim._fallback exactly."""

from libc.math cimport exp, log1p, tanh
from libc.stdlib cimport malloc, free

DEF ACT_TANH = 0


cdef inline double _softplus(double z) noexcept nogil:
    if z > 0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


cdef inline double _dot(const double *a, const double *b, Py_ssize_t n) noexcept nogil:
    # four partial sums so the loop pipelines without reassociation flags
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t j = 0
    while j + 4 <= n:
        s0 = s0 + a[j] * b[j]
        s1 = s1 + a[j + 1] * b[j + 1]
        s2 = s2 + a[j + 2] * b[j + 2]
        s3 = s3 + a[j + 3] * b[j + 3]
        j += 4
    while j < n:
        s0 = s0 + a[j] * b[j]
        j += 1
    return (s0 + s1) + (s2 + s3)


cdef inline void _axpy(double *y, double alpha, const double *x, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(n):
        y[j] = y[j] + alpha * x[j]


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def logreg_sgd_epoch(double[::1] w, const double[:, ::1] X, const double[::1] y,
                     const Py_ssize_t[::1] order, Py_ssize_t batch_size, double lr):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t lo, hi, b, i, j
    cdef double z, r, gb, total = 0.0, inv
    cdef const double *xi
    cdef double *g = <double *> malloc(d * sizeof(double))
    if g == NULL:
        raise MemoryError()
    try:
        with nogil:
            lo = 0
            while lo < n:
                hi = lo + batch_size
                if hi > n:
                    hi = n
                inv = 1.0 / (hi - lo)
                for j in range(d):
                    g[j] = 0.0
                gb = 0.0
                for b in range(lo, hi):
                    i = order[b]
                    xi = &X[i, 0]
                    z = w[d] + _dot(xi, &w[0], d)
                    total = total + _softplus(z) - y[i] * z
                    r = (_sigmoid(z) - y[i]) * inv
                    _axpy(g, r, xi, d)
                    gb = gb + r
                for j in range(d):
                    w[j] = w[j] - lr * g[j]
                w[d] = w[d] - lr * gb
                lo = hi
    finally:
        free(g)
    return total


def mlp_sgd_epoch(double[::1] w, const double[:, ::1] X, const double[::1] y,
                  const Py_ssize_t[::1] order, Py_ssize_t batch_size, double lr,
                  Py_ssize_t hidden, int activation):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t h = hidden
    cdef Py_ssize_t o_b1 = h * d, o_w2 = h * d + h, o_b2 = h * d + 2 * h
    cdef Py_ssize_t n_par = o_b2 + 1
    cdef Py_ssize_t lo, hi, b, i, j, k
    cdef double a, z, r, dh, total = 0.0, inv
    cdef const double *xi
    cdef double *g = <double *> malloc(n_par * sizeof(double))
    cdef double *hid = <double *> malloc(h * sizeof(double))
    cdef double *dact = <double *> malloc(h * sizeof(double))
    if g == NULL or hid == NULL or dact == NULL:
        free(g)
        free(hid)
        free(dact)
        raise MemoryError()
    try:
        with nogil:
            lo = 0
            while lo < n:
                hi = lo + batch_size
                if hi > n:
                    hi = n
                inv = 1.0 / (hi - lo)
                for j in range(n_par):
                    g[j] = 0.0
                for b in range(lo, hi):
                    i = order[b]
                    xi = &X[i, 0]
                    z = w[o_b2]
                    for k in range(h):
                        a = w[o_b1 + k] + _dot(xi, &w[k * d], d)
                        if activation == ACT_TANH:
                            hid[k] = tanh(a)
                            dact[k] = 1.0 - hid[k] * hid[k]
                        else:
                            if a > 0:
                                hid[k] = a
                                dact[k] = 1.0
                            else:
                                hid[k] = 0.0
                                dact[k] = 0.0
                        z = z + hid[k] * w[o_w2 + k]
                    total = total + _softplus(z) - y[i] * z
                    r = (_sigmoid(z) - y[i]) * inv
                    for k in range(h):
                        g[o_w2 + k] = g[o_w2 + k] + hid[k] * r
                        dh = r * w[o_w2 + k] * dact[k]
                        g[o_b1 + k] = g[o_b1 + k] + dh
                        _axpy(&g[k * d], dh, xi, d)
                    g[o_b2] = g[o_b2] + r
                for j in range(n_par):
                    w[j] = w[j] - lr * g[j]
                lo = hi
    finally:
        free(g)
        free(hid)
        free(dact)
    return total
