"""Latent-conditioned shifting-buffer decoder.

The buffer holds ``k`` columns of width ``d_buf``.  It is stored flattened as
[B, k*d_buf] with column 1 (the newest) first, so a shift is "prepend the new
column, drop the last ``d_buf`` entries".

Per step::

    c_t      = attention context over the phoneme embeddings (query: S_{t-1})
    C_t      = [c_t + tanh(F_u(s)), x_{t-1}]
    u        = N_u([S_{t-1}, C_t, z])
    S_t      = shift(S_{t-1}, u)
    x_hat_t  = N_o(S_t + F_o(s))          # F_o(s) added to every column

``decode_step`` evaluates exactly that chain.  ``run_decoder`` is the batched
training/synthesis loop; it precomputes every term that is constant over a
sequence (the speaker and z contributions) and folds them into the first-layer
biases of N_u and N_o.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionState, gmm_attention, query_raw
from .errors import DimensionError
from .numerics import (Tensor, add, as_tensor, broadcast_rows, concat, getitem, linear,
                       matmul, record1, reshape, tanh, tile_last)


@dataclass
class BufferState:
    """Flattened buffer S: [B, k*d_buf], newest column first."""

    S: Tensor
    k: int

    @property
    def d_buf(self):
        return self.S.shape[-1] // self.k

    def columns(self):
        """Buffer as an array [B, k, d_buf]; ``columns()[:, i]`` is S[i+1]."""
        return self.S.data.reshape(self.S.shape[0], self.k, self.d_buf)

    @classmethod
    def zeros(cls, batch, k, d_buf):
        return cls(Tensor._wrap(np.zeros((batch, k * d_buf))), k)

    @classmethod
    def from_columns(cls, cols):
        """Build from [B, k, d_buf] (or [k, d_buf] for a single sequence)."""
        cols = np.asarray(cols, dtype=np.float64)
        if cols.ndim == 2:
            cols = cols[None]
        B, k, d = cols.shape
        return cls(Tensor(cols.reshape(B, k * d)), k)


def shift_buffer(state, u):
    """S_t[1] = u; S_t[i+1] = S_{t-1}[i] for i < k; the oldest column is dropped."""
    u = as_tensor(u)
    S = state.S
    d = state.d_buf
    if u.ndim == 1:
        u = reshape(u, (1, u.shape[0]))
    if u.shape != (S.shape[0], d):
        raise DimensionError(f"shift_buffer: update {u.shape} does not match column width {d}")
    return BufferState(_shift(S, u, d), state.k)


def _shift(S, u, d):
    keep = S.shape[1] - d
    out = np.empty_like(S.data)
    out[:, :d] = u.data
    out[:, d:] = S.data[:, :keep]

    def bw(g):
        gS = np.zeros_like(g)
        gS[:, :keep] = g[:, d:]
        return gS, g[:, :d]
    return record1(out, (S, u), bw)


def _rows(x):
    x = as_tensor(x)
    return reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def compose_context_input(c_t, s, x_prev, params):
    """C_t = [c_t + tanh(F_u(s)), x_{t-1}]."""
    c_t, s, x_prev = _rows(c_t), _rows(s), _rows(x_prev)
    fu = linear(s, params["dec.fu.w"], params["dec.fu.b"])
    if fu.shape[1] != c_t.shape[1]:
        raise DimensionError(f"compose_context_input: F_u(s) width {fu.shape[1]} "
                             f"!= context width {c_t.shape[1]}")
    return concat([add(c_t, tanh(fu)), x_prev], axis=1)


def compute_update(state, C_t, z, params):
    """u = N_u([S_{t-1}, C_t, z]) with a two-layer ReLU network."""
    C_t, z = _rows(C_t), _rows(z)
    w1 = params["dec.nu1.w"]
    width = state.S.shape[1] + C_t.shape[1] + z.shape[1]
    if width != w1.shape[0]:
        raise DimensionError(f"compute_update: input width {width} != N_u input {w1.shape[0]}")
    B = state.S.shape[0]
    inputs = concat([state.S, broadcast_rows(C_t, B), broadcast_rows(z, B)], axis=1)
    h = linear(inputs, w1, params["dec.nu1.b"], "relu")
    return linear(h, params["dec.nu2.w"], params["dec.nu2.b"])


def predict_frame(state, s, params):
    """x_hat = N_o(S_t + F_o(s)); F_o(s) is added to each of the k columns."""
    s = _rows(s)
    fo = linear(s, params["dec.fo.w"], params["dec.fo.b"])
    if fo.shape[1] != state.d_buf:
        raise DimensionError(f"predict_frame: F_o(s) width {fo.shape[1]} != d_buf {state.d_buf}")
    h = linear(add(state.S, tile_last(fo, state.k)), params["dec.no1.w"],
               params["dec.no1.b"], "relu")
    return linear(h, params["dec.no2.w"], params["dec.no2.b"])


def decode_step(buffer, att_state, encoded, lengths, x_prev, z, s, params):
    """One generation step: attend, compose, update, shift, predict (in that order)."""
    raw = query_raw(params, buffer.S)
    ctx, kappa, w = gmm_attention(raw, att_state.kappa, encoded, lengths)
    C_t = compose_context_input(ctx, s, x_prev, params)
    u = compute_update(buffer, C_t, z, params)
    new_buffer = shift_buffer(buffer, u)
    x_hat = predict_frame(new_buffer, s, params)
    return x_hat, new_buffer, AttentionState(kappa, att_state.history + [w])


def semi_teacher_force(x_true_prev, x_pred_prev, eta):
    """x_tilde = (x_true + x_pred) / 2 + eta; differentiable in ``x_pred_prev``."""
    x_pred_prev = as_tensor(x_pred_prev)
    xt = np.asarray(x_true_prev.data if isinstance(x_true_prev, Tensor) else x_true_prev,
                    dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if xt.shape != x_pred_prev.shape or eta.shape != x_pred_prev.shape:
        raise DimensionError(f"semi_teacher_force: shapes {xt.shape}, {x_pred_prev.shape}, "
                             f"{eta.shape} differ")
    y = (xt + x_pred_prev.data) / 2 + eta
    return record1(y, (x_pred_prev,), lambda g: (0.5 * g,))


class _SequencePlan:
    """Per-sequence constants of the step function, folded into biases."""

    def __init__(self, params, cfg, z, s):
        kd = cfg.k * cfg.d_buf
        w1 = params["dec.nu1.w"]
        main = kd + cfg.d_p + cfg.d_x
        self.nu_w = getitem(w1, slice(0, main))
        w_ctx = getitem(w1, slice(kd, kd + cfg.d_p))
        w_z = getitem(w1, slice(main, main + cfg.d_z))
        tanh_fu = tanh(linear(s, params["dec.fu.w"], params["dec.fu.b"]))
        self.nu_b = add(add(params["dec.nu1.b"], matmul(tanh_fu, w_ctx)), matmul(z, w_z))
        fo = tile_last(linear(s, params["dec.fo.w"], params["dec.fo.b"]), cfg.k)
        self.no_b = add(params["dec.no1.b"], matmul(fo, params["dec.no1.w"]))


def run_decoder(params, cfg, emb, ph_lengths, z, s, n_steps, *, targets=None, eta=None,
                stop=None, keep_weights=False):
    """Run the decoder for ``n_steps`` frames on a batch.

    emb: [B, L, d_p] phoneme embeddings; z: [B, d_z]; s: [B or 1, d_s].
    With ``targets`` [B, T, d_x] the previous-frame input is semi-teacher-forced
    ``(x_{t-1} + x_hat_{t-1})/2 + eta_t`` (eta: [B, T, d_x], zeros if None);
    without targets the model's own previous output is fed back.
    ``stop(kappa, t)`` may end free-running generation early.
    Returns (list of x_hat Tensors [B, d_x], final kappa, list of weights).
    """
    emb, z, s = as_tensor(emb), as_tensor(z), as_tensor(s)
    B = emb.shape[0]
    ph_lengths = np.ascontiguousarray(ph_lengths, dtype=np.int64)
    plan = _SequencePlan(params, cfg, z, s)
    q1w, q1b = params["att.q1.w"], params["att.q1.b"]
    q2w, q2b = params["att.q2.w"], params["att.q2.b"]
    nu2w, nu2b = params["dec.nu2.w"], params["dec.nu2.b"]
    no2w = params["dec.no2.w"]
    no2b = params["dec.no2.b"]
    d = cfg.d_buf

    S = Tensor._wrap(np.zeros((B, cfg.k * d)))
    kappa = Tensor._wrap(np.zeros((B, cfg.att_components)))
    x_prev_true = np.zeros((B, cfg.d_x))
    x_hat = Tensor._wrap(np.zeros((B, cfg.d_x)))
    zero_eta = np.zeros((B, cfg.d_x))
    outputs, weights = [], []
    for t in range(n_steps):
        if targets is not None:
            x_in = semi_teacher_force(x_prev_true, x_hat,
                                      zero_eta if eta is None else eta[:, t])
            x_prev_true = targets[:, t]
        else:
            x_in = x_hat
        h = linear(S, q1w, q1b, "relu")
        raw = linear(h, q2w, q2b)
        ctx, kappa, w = gmm_attention(raw, kappa, emb, ph_lengths)
        hu = linear(concat([S, ctx, x_in], axis=1), plan.nu_w, plan.nu_b, "relu")
        u = linear(hu, nu2w, nu2b)
        S = _shift(S, u, d)
        ho = linear(S, params["dec.no1.w"], plan.no_b, "relu")
        x_hat = linear(ho, no2w, no2b)
        outputs.append(x_hat)
        if keep_weights:
            weights.append(w)
        if stop is not None and stop(kappa, t):
            break
    return outputs, kappa, weights
