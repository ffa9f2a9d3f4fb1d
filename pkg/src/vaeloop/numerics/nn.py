"""Neural-network primitives on top of the tape: convolution, pooling,
batch normalization, dropout and embedding lookup."""

import numpy as np

from ..errors import DimensionError, EmptySequenceError, InputTooShortError
from . import kernels
from .tensor import as_tensor, record1


def conv1d(x, w, stride=1, padding=0):
    """1-D cross-correlation.

    ``x`` is [C_in, L] or batched [B, C_in, L]; ``w`` is [C_out, C_in, K].
    Output length is ``(L + 2*padding - K) // stride + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} does not match weights {w.shape}")
    L, K = xd.shape[2], w.shape[2]
    if L + 2 * padding < K:
        raise InputTooShortError(
            f"conv1d: length {L} with padding {padding} is shorter than kernel {K}")
    y, cols = kernels.impl.conv1d_forward(xd, w.data, stride, padding)
    wd, xshape = w.data, xd.shape

    def bw(g):
        gx, gw = kernels.impl.conv1d_backward(g[None] if squeeze else g, cols, wd,
                                              xshape, stride, padding)
        return (gx[0] if squeeze else gx), gw
    return record1(y[0] if squeeze else y, (x, w), bw)


def conv_output_length(L, kernel, stride, padding):
    return (L + 2 * padding - kernel) // stride + 1


def global_max_pool_time(x, lengths=None):
    """Per-channel maximum over time; ties route the gradient to the first index.

    ``x`` is [C, L] or [B, C, L]; ``lengths`` optionally limits each batch row to
    its valid prefix.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise DimensionError(f"global_max_pool_time expects [C, L] or [B, C, L], got {x.shape}")
    B, _, L = xd.shape
    if L == 0:
        raise EmptySequenceError("global_max_pool_time: sequence has zero length")
    if lengths is None:
        lengths = np.full(B, L, dtype=np.int64)
    else:
        lengths = np.ascontiguousarray(lengths, dtype=np.int64)
        if (lengths < 1).any() or (lengths > L).any():
            raise EmptySequenceError("global_max_pool_time: every row needs 1..L valid steps")
    y, idx = kernels.impl.max_pool_forward(np.ascontiguousarray(xd), lengths)

    def bw(g):
        gx = kernels.impl.max_pool_backward(np.ascontiguousarray(g[None] if squeeze else g),
                                            idx, L)
        return (gx[0] if squeeze else gx,)
    return record1(y[0] if squeeze else y, (x,), bw)


def time_mask(lengths, L):
    """[B, 1, L] float mask of valid time steps."""
    return (np.arange(L)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[:, None, :]


class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    def __init__(self, channels, momentum=0.9):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state, mask, training, eps=1e-5):
    """Per-channel batch normalization of x [B, C, L] over valid (batch, time) cells.

    Training mode normalizes with batch statistics and updates ``state`` in
    place; inference uses the running statistics.  Output is zero outside
    ``mask``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    gd = gamma.data[None, :, None]
    if training:
        n = mask.sum()
        mu = (xd * mask).sum(axis=(0, 2)) / n
        xc = (xd - mu[None, :, None]) * mask
        var = (xc * xc).sum(axis=(0, 2)) / n
        m = state.momentum
        state.mean = m * state.mean + (1 - m) * mu
        state.var = m * state.var + (1 - m) * (var * n / max(n - 1, 1))
    else:
        xc = (xd - state.mean[None, :, None]) * mask
        var = state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None]
    y = (gd * xhat + beta.data[None, :, None]) * mask

    def bw(g):
        gm = g * mask
        gbeta = gm.sum(axis=(0, 2))
        ggamma = (gm * xhat).sum(axis=(0, 2))
        gxhat = gm * gd
        if training:
            s1 = gxhat.sum(axis=(0, 2))[None, :, None]
            s2 = (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
            gx = (inv[None, :, None] / n) * (n * gxhat - s1 - xhat * s2) * mask
        else:
            gx = gxhat * inv[None, :, None]
        return gx, ggamma, gbeta
    return record1(y, (x, gamma, beta), bw)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record1(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding ids must lie in [0, {V})")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)
    return record1(table.data[ids], (table,), bw)
