"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels_c.pyx`` with the same signature
and the same cache layout, so the two backends are interchangeable.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_WIDTH_MIN = float(np.log(1e-3))
LOG_WIDTH_MAX = float(np.log(1e3))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def gmm_attention_forward(raw, kappa_prev, emb, lengths):
    """One step of Gaussian-mixture monotonic attention.

    raw: [B, 3K] unconstrained (mixture logits, log-widths, location increments).
    kappa_prev: [B, K]; emb: [B, L, D]; lengths: [B] valid phoneme counts.
    Returns (context [B, D], kappa [B, K], weights [B, L], cache).
    """
    B, K = kappa_prev.shape
    L = emb.shape[1]
    ah = raw[:, :K]
    lw = raw[:, K:2 * K]
    kh = raw[:, 2 * K:]
    amax = ah.max(axis=1, keepdims=True)
    ea = np.exp(ah - amax)
    alpha = ea / ea.sum(axis=1, keepdims=True)
    log_alpha = ah - (amax + np.log(ea.sum(axis=1, keepdims=True)))
    inside = (lw >= LOG_WIDTH_MIN) & (lw <= LOG_WIDTH_MAX)
    inv_w2 = np.exp(-2.0 * np.clip(lw, LOG_WIDTH_MIN, LOG_WIDTH_MAX))
    kappa = kappa_prev + np.logaddexp(0.0, kh)

    pos = np.arange(L, dtype=np.float64)
    d = pos[None, None, :] - kappa[:, :, None]
    a = log_alpha[:, :, None] - 0.5 * (d * d) * inv_w2[:, :, None]
    a_max = a.max(axis=1, keepdims=True)
    e = np.exp(a - a_max)
    s = e.sum(axis=1, keepdims=True)
    resp = e / s
    log_phi = a_max[:, 0, :] + np.log(s[:, 0, :])

    valid = pos[None, :] < lengths[:, None]
    log_phi = np.where(valid, log_phi, -np.inf)
    ew = np.exp(log_phi - log_phi.max(axis=1, keepdims=True))
    w = ew / ew.sum(axis=1, keepdims=True)
    ctx = np.matmul(w[:, None, :], emb)[:, 0, :]
    cache = (w, resp, kappa, inv_w2, alpha, _sigmoid(kh), inside)
    return ctx, kappa, w, cache


def gmm_attention_backward(g_ctx, g_kappa, cache, emb):
    """Gradients w.r.t. (raw, kappa_prev, emb) for :func:`gmm_attention_forward`."""
    w, resp, kappa, inv_w2, alpha, sig_kh, inside = cache
    L = emb.shape[1]
    g_w = np.matmul(emb, g_ctx[:, :, None])[:, :, 0]
    g_emb = w[:, :, None] * g_ctx[:, None, :]
    g_logphi = w * (g_w - (w * g_w).sum(axis=1, keepdims=True))
    g_a = g_logphi[:, None, :] * resp
    d = np.arange(L, dtype=np.float64)[None, None, :] - kappa[:, :, None]
    g_log_alpha = g_a.sum(axis=2)
    gad = g_a * d
    g_kappa_tot = g_kappa + gad.sum(axis=2) * inv_w2
    g_lw = (gad * d).sum(axis=2) * inv_w2 * inside
    g_ah = g_log_alpha - alpha * g_log_alpha.sum(axis=1, keepdims=True)
    g_kh = g_kappa_tot * sig_kh
    g_raw = np.concatenate([g_ah, g_lw, g_kh], axis=1)
    return g_raw, g_kappa_tot, g_emb


def conv1d_forward(x, w, stride, padding):
    """Cross-correlation of x [B, C, L] with w [O, C, K] -> ([B, O, L_out], cols)."""
    B, C, L = x.shape
    O, _, K = w.shape
    L_out = (L + 2 * padding - K) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :L_out]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * L_out, C * K)
    y = cols @ w.reshape(O, C * K).T
    return np.ascontiguousarray(y.reshape(B, L_out, O).transpose(0, 2, 1)), cols


def conv1d_backward(g, cols, w, x_shape, stride, padding):
    B, C, L = x_shape
    O, _, K = w.shape
    L_out = g.shape[2]
    gm = g.transpose(0, 2, 1).reshape(B * L_out, O)
    gw = (gm.T @ cols).reshape(O, C, K)
    gcols = (gm @ w.reshape(O, C * K)).reshape(B, L_out, C, K)
    gxp = np.zeros((B, C, L + 2 * padding))
    span = stride * (L_out - 1) + 1
    for kk in range(K):
        gxp[:, :, kk:kk + span:stride] += gcols[:, :, :, kk].transpose(0, 2, 1)
    return gxp[:, :, padding:padding + L], gw


def max_pool_forward(x, lengths):
    """Max over the valid prefix of the time axis; first index wins ties."""
    L = x.shape[2]
    valid = np.arange(L)[None, None, :] < lengths[:, None, None]
    idx = np.argmax(np.where(valid, x, -np.inf), axis=2)
    y = np.take_along_axis(x, idx[:, :, None], axis=2)[:, :, 0]
    return y, idx


def max_pool_backward(g, idx, L):
    B, C = g.shape
    gx = np.zeros((B, C, L))
    np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
    return gx
