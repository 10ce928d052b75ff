# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row kernels, drop-in replacements for the plain versions.

Same contracts as the numpy backend: 2D C-contiguous float64 inputs, one
independent reduction per row. Results agree with the plain backend to
rounding (summation order differs), and each function releases work into
tight C loops instead of several temporaries per call.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def layer_norm_forward(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    y_arr = np.empty((R, C))
    mean_arr = np.empty(R)
    rstd_arr = np.empty(R)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr, rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double s, m, var, d, r
    for i in range(R):
        s = 0.0
        for j in range(C):
            s += x[i, j]
        m = s / C
        var = 0.0
        for j in range(C):
            d = x[i, j] - m
            var += d * d
        r = 1.0 / sqrt(var / C + eps)
        mean[i] = m
        rstd[i] = r
        for j in range(C):
            y[i, j] = (x[i, j] - m) * r * gamma[j] + beta[j]
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(double[:, ::1] dy, double[:, ::1] x, double[::1] gamma,
                        double[::1] mean, double[::1] rstd):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    dx_arr = np.empty((R, C))
    dgamma_arr = np.zeros(C)
    dbeta_arr = np.zeros(C)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr, dbeta = dbeta_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, dxhat, r
    for i in range(R):
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(C):
            xhat = (x[i, j] - mean[i]) * r
            dxhat = dy[i, j] * gamma[j]
            m1 += dxhat
            m2 += dxhat * xhat
            dgamma[j] += dy[i, j] * xhat
            dbeta[j] += dy[i, j]
        m1 /= C
        m2 /= C
        for j in range(C):
            xhat = (x[i, j] - mean[i]) * r
            dxhat = dy[i, j] * gamma[j]
            dx[i, j] = r * (dxhat - m1 - xhat * m2)
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_forward(double[:, ::1] scores):
    cdef Py_ssize_t R = scores.shape[0], C = scores.shape[1]
    probs_arr = np.empty((R, C))
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j
    cdef double hi, z, e
    for i in range(R):
        hi = scores[i, 0]
        for j in range(1, C):
            if scores[i, j] > hi:
                hi = scores[i, j]
        z = 0.0
        for j in range(C):
            e = exp(scores[i, j] - hi)
            probs[i, j] = e
            z += e
        for j in range(C):
            probs[i, j] /= z
    return probs_arr


def softmax_backward(double[:, ::1] dprobs, double[:, ::1] probs):
    cdef Py_ssize_t R = probs.shape[0], C = probs.shape[1]
    dscores_arr = np.empty((R, C))
    cdef double[:, ::1] dscores = dscores_arr
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(R):
        inner = 0.0
        for j in range(C):
            inner += dprobs[i, j] * probs[i, j]
        for j in range(C):
            dscores[i, j] = probs[i, j] * (dprobs[i, j] - inner)
    return dscores_arr


def cross_entropy_forward(double[:, ::1] logits, cnp.int64_t[::1] targets,
                          double[::1] weights):
    cdef Py_ssize_t R = logits.shape[0], C = logits.shape[1]
    losses_arr = np.empty(R)
    probs_arr = np.empty((R, C))
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j, t
    cdef double hi, z, e
    for i in range(R):
        hi = logits[i, 0]
        for j in range(1, C):
            if logits[i, j] > hi:
                hi = logits[i, j]
        z = 0.0
        for j in range(C):
            e = exp(logits[i, j] - hi)
            probs[i, j] = e
            z += e
        for j in range(C):
            probs[i, j] /= z
        t = targets[i]
        losses[i] = -weights[i] * (logits[i, t] - hi - log(z))
    return losses_arr, probs_arr


def cross_entropy_backward(double[:, ::1] probs, cnp.int64_t[::1] targets,
                           double[::1] weights, double scale):
    cdef Py_ssize_t R = probs.shape[0], C = probs.shape[1]
    dlogits_arr = np.empty((R, C))
    cdef double[:, ::1] dlogits = dlogits_arr
    cdef Py_ssize_t i, j
    cdef double w
    for i in range(R):
        w = weights[i] * scale
        for j in range(C):
            dlogits[i, j] = probs[i, j] * w
        dlogits[i, targets[i]] -= w
    return dlogits_arr
