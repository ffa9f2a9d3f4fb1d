"""Gaussian-mixture monotonic attention over an encoded phoneme sequence.

Each of ``K`` components has a mixture weight, a width and a location
``kappa`` (in phoneme-index units).  Locations only move forward: every step
adds a softplus-positive increment predicted from the decoder's buffer.
The per-phoneme score is the log of the mixture density; the scores are
normalized over the valid phonemes, so the context is a convex combination
of phoneme embeddings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptySequenceError
from .numerics import Tensor, as_tensor, kernels, linear, record, reshape


@dataclass
class AttentionState:
    """Component locations plus the weights emitted so far (diagnostics only)."""

    kappa: Tensor
    history: list = field(default_factory=list)

    @property
    def n_components(self):
        return self.kappa.shape[-1]

    @classmethod
    def initial(cls, batch, n_components):
        return cls(Tensor._wrap(np.zeros((batch, n_components))))


def gmm_attention(raw, kappa_prev, emb, lengths):
    """Differentiable attention step.

    raw: [B, 3K] (mixture logits | log-widths | increment pre-activations);
    kappa_prev: [B, K]; emb: [B, L, D]; lengths: [B] valid phoneme counts.
    Returns (context [B, D], kappa [B, K], weights ndarray [B, L]).
    """
    raw, kappa_prev, emb = as_tensor(raw), as_tensor(kappa_prev), as_tensor(emb)
    B, K = kappa_prev.shape
    if raw.shape != (B, 3 * K):
        raise DimensionError(f"attention: raw {raw.shape} must be ({B}, {3 * K})")
    if emb.ndim != 3 or emb.shape[0] != B:
        raise DimensionError(f"attention: embeddings {emb.shape} do not match batch {B}")
    if emb.shape[1] == 0:
        raise EmptySequenceError("attention over an empty phoneme sequence")
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    if (lengths < 1).any():
        raise EmptySequenceError("attention over an empty phoneme sequence")
    impl = kernels.impl
    ctx, kappa, w, cache = impl.gmm_attention_forward(
        np.ascontiguousarray(raw.data), np.ascontiguousarray(kappa_prev.data),
        np.ascontiguousarray(emb.data), lengths)
    emb_data = np.ascontiguousarray(emb.data)

    def bw(g_ctx, g_kappa):
        return impl.gmm_attention_backward(np.ascontiguousarray(g_ctx),
                                           np.ascontiguousarray(g_kappa), cache, emb_data)
    ctx_t, kappa_t = record((ctx, kappa), (raw, kappa_prev, emb), bw)
    return ctx_t, kappa_t, w


def query_raw(params, flat_buffer):
    """Map the flattened buffer to raw attention parameters."""
    h = linear(flat_buffer, params["att.q1.w"], params["att.q1.b"], "relu")
    return linear(h, params["att.q2.w"], params["att.q2.b"])


def attend(state, encoded, query, params, lengths=None):
    """Advance attention one step.

    ``encoded`` is [B, L, D] (or [L, D] for a single sequence) and ``query`` the
    flattened previous buffer [B, k*d_buf].  Returns (context, new state).
    """
    encoded, query = as_tensor(encoded), as_tensor(query)
    single = encoded.ndim == 2
    if single:
        encoded = reshape(encoded, (1,) + encoded.shape)
        if query.ndim == 1:
            query = reshape(query, (1, query.shape[0]))
    if encoded.shape[1] == 0:
        raise EmptySequenceError("attention over an empty phoneme sequence")
    if lengths is None:
        lengths = np.full(encoded.shape[0], encoded.shape[1], dtype=np.int64)
    raw = query_raw(params, query)
    ctx, kappa, w = gmm_attention(raw, state.kappa, encoded, lengths)
    history = state.history + [w]
    if single:
        ctx = reshape(ctx, (ctx.shape[1],))
    return ctx, AttentionState(kappa, history)


def has_terminated(kappa, n_phonemes, margin):
    """True once the mean component location passes the last phoneme by ``margin``."""
    k = kappa.data if isinstance(kappa, Tensor) else np.asarray(kappa, dtype=np.float64)
    return bool(k.mean() >= n_phonemes - 1 + margin)


def mixture_weights_direct(raw, kappa_prev, n_phonemes):
    """Unvectorized reference evaluation of one attention step (single sequence).

    Returns (weights over phonemes, new kappa).  Slow; used as a test oracle and
    for documentation of the exact formula.
    """
    raw = [float(v) for v in raw]
    K = len(kappa_prev)
    lo, hi = np.log(1e-3), np.log(1e3)
    mx = max(raw[:K])
    z = sum(np.exp(r - mx) for r in raw[:K])
    alpha = [np.exp(r - mx) / z for r in raw[:K]]
    width = [np.exp(min(max(r, lo), hi)) for r in raw[K:2 * K]]
    kappa = [kp + np.log1p(np.exp(r)) for kp, r in zip(kappa_prev, raw[2 * K:])]
    phi = []
    for j in range(n_phonemes):
        phi.append(sum(alpha[i] * np.exp(-(j - kappa[i]) ** 2 / (2 * width[i] ** 2))
                       for i in range(K)))
    total = sum(phi)
    return [p / total for p in phi], kappa


def export_alignment_csv(path, weights, n_phonemes=None):
    """Write per-step attention weights as CSV rows ``step,phoneme_index,weight``.

    ``weights`` is a sequence of per-step weight vectors for one utterance.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "phoneme_index", "weight"])
        for step, w in enumerate(weights):
            w = np.asarray(w).reshape(-1)
            n = len(w) if n_phonemes is None else n_phonemes
            for j in range(n):
                writer.writerow([step, j, repr(float(w[j]))])
