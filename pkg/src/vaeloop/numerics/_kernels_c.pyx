# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: Gaussian-mixture attention and masked max-pooling.

Same signatures and cache layout as ``_kernels_np``.  Convolution is not
here: the im2col + BLAS path in numpy is faster than direct loops.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY

cnp.import_array()

cdef double LOG_WIDTH_MIN = log(1e-3)
cdef double LOG_WIDTH_MAX = log(1e3)


cdef inline double _softplus(double v) nogil:
    if v > 0:
        return v + log1p(exp(-v))
    return log1p(exp(v))


cdef inline double _sigmoid(double v) nogil:
    cdef double e
    if v >= 0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


def gmm_attention_forward(double[:, ::1] raw, double[:, ::1] kappa_prev,
                          double[:, :, ::1] emb, long[::1] lengths):
    cdef Py_ssize_t B = kappa_prev.shape[0]
    cdef Py_ssize_t K = kappa_prev.shape[1]
    cdef Py_ssize_t L = emb.shape[1]
    cdef Py_ssize_t D = emb.shape[2]
    cdef Py_ssize_t b, k, j, q, n
    cdef double amax, s, lw, dd, am, m, tot

    ctx_a = np.zeros((B, D))
    kappa_a = np.empty((B, K))
    w_a = np.zeros((B, L))
    resp_a = np.empty((B, K, L))
    inv_w2_a = np.empty((B, K))
    alpha_a = np.empty((B, K))
    sig_a = np.empty((B, K))
    inside_a = np.empty((B, K), dtype=np.bool_)
    logphi_a = np.empty(L)
    la_a = np.empty(K)
    arow_a = np.empty(K)

    cdef double[:, ::1] ctx = ctx_a
    cdef double[:, ::1] kappa = kappa_a
    cdef double[:, ::1] w = w_a
    cdef double[:, :, ::1] resp = resp_a
    cdef double[:, ::1] inv_w2 = inv_w2_a
    cdef double[:, ::1] alpha = alpha_a
    cdef double[:, ::1] sig = sig_a
    cdef cnp.npy_bool[:, ::1] inside = inside_a
    cdef double[::1] logphi = logphi_a
    cdef double[::1] la = la_a
    cdef double[::1] arow = arow_a

    with nogil:
        for b in range(B):
            amax = raw[b, 0]
            for k in range(1, K):
                if raw[b, k] > amax:
                    amax = raw[b, k]
            s = 0.0
            for k in range(K):
                s += exp(raw[b, k] - amax)
            for k in range(K):
                alpha[b, k] = exp(raw[b, k] - amax) / s
                la[k] = raw[b, k] - (amax + log(s))
                lw = raw[b, K + k]
                inside[b, k] = LOG_WIDTH_MIN <= lw <= LOG_WIDTH_MAX
                if lw < LOG_WIDTH_MIN:
                    lw = LOG_WIDTH_MIN
                elif lw > LOG_WIDTH_MAX:
                    lw = LOG_WIDTH_MAX
                inv_w2[b, k] = exp(-2.0 * lw)
                kappa[b, k] = kappa_prev[b, k] + _softplus(raw[b, 2 * K + k])
                sig[b, k] = _sigmoid(raw[b, 2 * K + k])
            n = lengths[b]
            m = -INFINITY
            for j in range(L):
                am = -INFINITY
                for k in range(K):
                    dd = j - kappa[b, k]
                    arow[k] = la[k] - 0.5 * dd * dd * inv_w2[b, k]
                    if arow[k] > am:
                        am = arow[k]
                s = 0.0
                for k in range(K):
                    resp[b, k, j] = exp(arow[k] - am)
                    s += resp[b, k, j]
                for k in range(K):
                    resp[b, k, j] /= s
                logphi[j] = am + log(s)
                if j < n and logphi[j] > m:
                    m = logphi[j]
            tot = 0.0
            for j in range(n):
                w[b, j] = exp(logphi[j] - m)
                tot += w[b, j]
            for j in range(n):
                w[b, j] /= tot
                for q in range(D):
                    ctx[b, q] += w[b, j] * emb[b, j, q]
    cache = (w_a, resp_a, kappa_a, inv_w2_a, alpha_a, sig_a, inside_a)
    return ctx_a, kappa_a, w_a, cache


def gmm_attention_backward(double[:, ::1] g_ctx, double[:, ::1] g_kappa, tuple cache,
                           double[:, :, ::1] emb):
    cdef double[:, ::1] w = cache[0]
    cdef double[:, :, ::1] resp = cache[1]
    cdef double[:, ::1] kappa = cache[2]
    cdef double[:, ::1] inv_w2 = cache[3]
    cdef double[:, ::1] alpha = cache[4]
    cdef double[:, ::1] sig = cache[5]
    cdef cnp.npy_bool[:, ::1] inside = cache[6]
    cdef Py_ssize_t B = kappa.shape[0]
    cdef Py_ssize_t K = kappa.shape[1]
    cdef Py_ssize_t L = emb.shape[1]
    cdef Py_ssize_t D = emb.shape[2]
    cdef Py_ssize_t b, k, j, q
    cdef double acc, dot, ga, dd, sla, gkt

    g_raw_a = np.empty((B, 3 * K))
    g_kprev_a = np.empty((B, K))
    g_emb_a = np.empty((B, L, D))
    gw_a = np.empty(L)
    gla_a = np.empty(K)
    gk_a = np.empty(K)
    glw_a = np.empty(K)
    cdef double[:, ::1] g_raw = g_raw_a
    cdef double[:, ::1] g_kprev = g_kprev_a
    cdef double[:, :, ::1] g_emb = g_emb_a
    cdef double[::1] gw = gw_a
    cdef double[::1] gla = gla_a
    cdef double[::1] gk = gk_a
    cdef double[::1] glw = glw_a

    with nogil:
        for b in range(B):
            dot = 0.0
            for j in range(L):
                acc = 0.0
                for q in range(D):
                    acc += emb[b, j, q] * g_ctx[b, q]
                    g_emb[b, j, q] = w[b, j] * g_ctx[b, q]
                gw[j] = acc
                dot += w[b, j] * acc
            for k in range(K):
                gla[k] = 0.0
                gk[k] = 0.0
                glw[k] = 0.0
            for j in range(L):
                ga = w[b, j] * (gw[j] - dot)
                if ga == 0.0:
                    continue
                for k in range(K):
                    acc = ga * resp[b, k, j]
                    dd = j - kappa[b, k]
                    gla[k] += acc
                    gk[k] += acc * dd
                    glw[k] += acc * dd * dd
            sla = 0.0
            for k in range(K):
                sla += gla[k]
            for k in range(K):
                gkt = g_kappa[b, k] + gk[k] * inv_w2[b, k]
                g_raw[b, k] = gla[k] - alpha[b, k] * sla
                g_raw[b, K + k] = glw[k] * inv_w2[b, k] if inside[b, k] else 0.0
                g_raw[b, 2 * K + k] = gkt * sig[b, k]
                g_kprev[b, k] = gkt
    return g_raw_a, g_kprev_a, g_emb_a


def max_pool_forward(double[:, :, ::1] x, long[::1] lengths):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t C = x.shape[1]
    cdef Py_ssize_t b, c, t, best
    cdef double v
    y_a = np.empty((B, C))
    idx_a = np.empty((B, C), dtype=np.int64)
    cdef double[:, ::1] y = y_a
    cdef long[:, ::1] idx = idx_a
    with nogil:
        for b in range(B):
            for c in range(C):
                best = 0
                v = x[b, c, 0]
                for t in range(1, lengths[b]):
                    if x[b, c, t] > v:
                        v = x[b, c, t]
                        best = t
                y[b, c] = v
                idx[b, c] = best
    return y_a, idx_a


def max_pool_backward(double[:, ::1] g, long[:, ::1] idx, Py_ssize_t L):
    cdef Py_ssize_t B = g.shape[0]
    cdef Py_ssize_t C = g.shape[1]
    cdef Py_ssize_t b, c
    gx_a = np.zeros((B, C, L))
    cdef double[:, :, ::1] gx = gx_a
    with nogil:
        for b in range(B):
            for c in range(C):
                gx[b, c, idx[b, c]] = g[b, c]
    return gx_a
