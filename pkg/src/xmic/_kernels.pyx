# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``."""
import numpy as np
cimport cython
from libc.math cimport exp, sqrt, pow

ctypedef fused real:
    float
    double


def attention_forward(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v, double scale):
    cdef Py_ssize_t G = q.shape[0], L = q.shape[1], dh = q.shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((G, L, dh), dtype=dtype)
    probs_arr = np.empty((G, L, L), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef real[:, :, ::1] probs = probs_arr
    cdef Py_ssize_t g, i, j, d
    cdef double s, mx, tot, p
    with nogil:
        for g in range(G):
            for i in range(L):
                mx = -1e308
                for j in range(L):
                    s = 0.0
                    for d in range(dh):
                        s = s + q[g, i, d] * k[g, j, d]
                    s = s * scale
                    probs[g, i, j] = <real>s
                    if s > mx:
                        mx = s
                tot = 0.0
                for j in range(L):
                    p = exp(probs[g, i, j] - mx)
                    probs[g, i, j] = <real>p
                    tot = tot + p
                for j in range(L):
                    probs[g, i, j] = <real>(probs[g, i, j] / tot)
                for j in range(L):
                    p = probs[g, i, j]
                    for d in range(dh):
                        out[g, i, d] += <real>(p * v[g, j, d])
    return out_arr, probs_arr


def attention_backward(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                       real[:, :, ::1] probs, real[:, :, ::1] gout, double scale):
    cdef Py_ssize_t G = q.shape[0], L = q.shape[1], dh = q.shape[2]
    dtype = np.float32 if real is float else np.float64
    gq_arr = np.zeros((G, L, dh), dtype=dtype)
    gk_arr = np.zeros((G, L, dh), dtype=dtype)
    gv_arr = np.zeros((G, L, dh), dtype=dtype)
    gs_arr = np.empty((L, L), dtype=np.float64)
    cdef real[:, :, ::1] gq = gq_arr
    cdef real[:, :, ::1] gk = gk_arr
    cdef real[:, :, ::1] gv = gv_arr
    cdef double[:, ::1] gs = gs_arr
    cdef Py_ssize_t g, i, j, d
    cdef double acc, row, p
    with nogil:
        for g in range(G):
            for i in range(L):
                row = 0.0
                for j in range(L):
                    acc = 0.0
                    for d in range(dh):
                        acc = acc + gout[g, i, d] * v[g, j, d]
                    gs[i, j] = acc
                    row = row + acc * probs[g, i, j]
                for j in range(L):
                    p = probs[g, i, j]
                    gs[i, j] = p * (gs[i, j] - row)
                    for d in range(dh):
                        gv[g, j, d] += <real>(p * gout[g, i, d])
            for i in range(L):
                for j in range(L):
                    acc = gs[i, j] * scale
                    for d in range(dh):
                        gq[g, i, d] += <real>(acc * k[g, j, d])
                        gk[g, j, d] += <real>(acc * q[g, i, d])
    return gq_arr, gk_arr, gv_arr


def layer_norm_forward(real[:, ::1] x, double eps):
    cdef Py_ssize_t M = x.shape[0], D = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    xhat_arr = np.empty((M, D), dtype=dtype)
    rstd_arr = np.empty(M, dtype=dtype)
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef Py_ssize_t r, d
    cdef double mu, var, c, rs
    with nogil:
        for r in range(M):
            mu = 0.0
            for d in range(D):
                mu = mu + x[r, d]
            mu = mu / D
            var = 0.0
            for d in range(D):
                c = x[r, d] - mu
                var = var + c * c
            var = var / D
            rs = 1.0 / sqrt(var + eps)
            rstd[r] = <real>rs
            for d in range(D):
                xhat[r, d] = <real>((x[r, d] - mu) * rs)
    return xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] xhat, real[::1] rstd, real[:, ::1] gxhat):
    cdef Py_ssize_t M = xhat.shape[0], D = xhat.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((M, D), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef Py_ssize_t r, d
    cdef double m1, m2
    with nogil:
        for r in range(M):
            m1 = 0.0
            m2 = 0.0
            for d in range(D):
                m1 = m1 + gxhat[r, d]
                m2 = m2 + gxhat[r, d] * xhat[r, d]
            m1 = m1 / D
            m2 = m2 / D
            for d in range(D):
                gx[r, d] = <real>((gxhat[r, d] - m1 - xhat[r, d] * m2) * rstd[r])
    return gx_arr


def adamw_update(real[::1] w, real[::1] g, real[::1] m, real[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, long step):
    cdef Py_ssize_t n = w.shape[0], i
    cdef double step_size = lr / (1.0 - pow(beta1, step))
    cdef double inv_sqrt_bc2 = 1.0 / sqrt(1.0 - pow(beta2, step))
    cdef double decay = lr * weight_decay
    cdef double gi, mi, vi, wi
    with nogil:
        for i in range(n):
            gi = g[i]
            wi = w[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
            m[i] = <real>mi
            v[i] = <real>vi
            w[i] = <real>(wi - step_size * mi / (sqrt(vi) * inv_sqrt_bc2 + eps) - decay * wi)
