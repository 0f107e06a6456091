# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: row softmax, layer norm, fused Adam, row scatter-add.

Single-threaded by design so results are deterministic for a fixed seed.
"""

import numpy as np

from libc.math cimport exp, pow, sqrt

ctypedef fused real:
    float
    double


cdef inline object _dtype_of(bint is_double):
    return np.float64 if is_double else np.float32


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    out_np = np.empty((r, c), dtype=_dtype_of(real is double))
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real m, s, v
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0
        for j in range(c):
            v = exp(x[i, j] - m)
            out[i, j] = v
            s += v
        for j in range(c):
            out[i, j] /= s
    return out_np


def softmax_backward(real[:, ::1] y, real[:, ::1] grad):
    cdef Py_ssize_t r = y.shape[0], c = y.shape[1]
    out_np = np.empty((r, c), dtype=_dtype_of(real is double))
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real dot
    for i in range(r):
        dot = 0
        for j in range(c):
            dot += y[i, j] * grad[i, j]
        for j in range(c):
            out[i, j] = y[i, j] * (grad[i, j] - dot)
    return out_np


def layernorm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    dtype = _dtype_of(real is double)
    y_np = np.empty((r, c), dtype=dtype)
    mean_np = np.empty(r, dtype=dtype)
    rstd_np = np.empty(r, dtype=dtype)
    cdef real[:, ::1] y = y_np
    cdef real[::1] mean = mean_np
    cdef real[::1] rstd = rstd_np
    cdef Py_ssize_t i, j
    cdef double m, var, d
    for i in range(r):
        m = 0
        for j in range(c):
            m += x[i, j]
        m /= c
        var = 0
        for j in range(c):
            d = x[i, j] - m
            var += d * d
        var /= c
        mean[i] = <real> m
        rstd[i] = <real> (1.0 / sqrt(var + eps))
        for j in range(c):
            y[i, j] = (x[i, j] - mean[i]) * rstd[i] * gain[j] + bias[j]
    return y_np, mean_np, rstd_np


def layernorm_backward(real[:, ::1] x, real[::1] gain, real[::1] mean,
                       real[::1] rstd, real[:, ::1] grad):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    dtype = _dtype_of(real is double)
    dx_np = np.empty((r, c), dtype=dtype)
    dgain_np = np.zeros(c, dtype=dtype)
    dbias_np = np.zeros(c, dtype=dtype)
    cdef real[:, ::1] dx = dx_np
    cdef real[::1] dgain = dgain_np
    cdef real[::1] dbias = dbias_np
    cdef Py_ssize_t i, j
    cdef double a, b, gx, xhat
    for i in range(r):
        a = 0
        b = 0
        for j in range(c):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            gx = grad[i, j] * gain[j]
            a += gx
            b += gx * xhat
            dgain[j] += <real> (grad[i, j] * xhat)
            dbias[j] += grad[i, j]
        a /= c
        b /= c
        for j in range(c):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            gx = grad[i, j] * gain[j]
            dx[i, j] = <real> ((gx - a - xhat * b) * rstd[i])
    return dx_np, dgain_np, dbias_np


def adam_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps, long long step):
    cdef Py_ssize_t n = param.shape[0]
    cdef double bias1 = 1.0 - pow(beta1, <double> step)
    cdef double bias2 = 1.0 - pow(beta2, <double> step)
    cdef Py_ssize_t i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * grad[i]
        vi = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        m[i] = <real> mi
        v[i] = <real> vi
        param[i] -= <real> (lr * (mi / bias1) / (sqrt(vi / bias2) + eps))


def scatter_add_rows(real[:, ::1] out, long long[::1] index, real[:, ::1] rows):
    cdef Py_ssize_t n = rows.shape[0], c = rows.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(n):
        r = <Py_ssize_t> index[i]
        for j in range(c):
            out[r, j] += rows[i, j]
