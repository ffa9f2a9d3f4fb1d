"""Approximate posterior q(z | x): acoustic sequence -> diagonal Gaussian.

Stack of stride-2 convolutions (each followed by batch-norm, ReLU and
dropout), global max-pooling over time, one hidden fully connected layer and
two linear heads for the mean and log-variance.  Sequences in a batch may
have different lengths; padded positions are masked after every layer so a
batched encode equals encoding each sequence on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputTooShortError
from .numerics import (Tensor, add, as_tensor, batch_norm, clip, conv1d, conv_output_length,
                       dropout, exp, global_max_pool_time, linear, mul, relu, reshape,
                       time_mask, transpose)

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class PosteriorParams:
    mu: Tensor
    log_var: Tensor

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_var.data)


def min_length(cfg):
    """Shortest input the conv stack accepts (each stride-2 layer halves the length)."""
    return cfg.enc_stride ** len(cfg.enc_channels)


def encode(params, cfg, frames, lengths=None, *, training=False, rng=None, bn_states=None):
    """Posterior parameters for a batch of acoustic sequences.

    frames: [T, d_x] or padded [B, T, d_x]; lengths: valid frame counts per row.
    In training mode dropout draws from ``rng`` and batch-norm updates
    ``bn_states``; inference is deterministic.
    """
    frames = as_tensor(frames)
    single = frames.ndim == 2
    data = frames.data[None] if single else frames.data
    if data.ndim != 3 or data.shape[2] != cfg.d_x:
        raise DimensionError(f"encode expects [B, T, {cfg.d_x}] frames, got {frames.shape}")
    B, T, _ = data.shape
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, np.int64)
    need = min_length(cfg)
    if lengths.min() < need:
        raise InputTooShortError(
            f"encoder needs at least {need} frames, got {int(lengths.min())}")
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training-mode encode needs an rng for dropout")

    x = reshape(frames, (1, T, cfg.d_x)) if single else frames
    h = transpose(x, (0, 2, 1))
    pad = cfg.enc_kernel // 2
    for i in range(len(cfg.enc_channels)):
        h = conv1d(h, params[f"enc.conv{i}.w"], stride=cfg.enc_stride, padding=pad)
        lengths = conv_output_length(lengths, cfg.enc_kernel, cfg.enc_stride, pad)
        mask = time_mask(lengths, h.shape[2])
        h = add(h, reshape(params[f"enc.conv{i}.b"], (1, -1, 1)))
        if cfg.batchnorm:
            h = batch_norm(h, params[f"enc.bn{i}.gamma"], params[f"enc.bn{i}.beta"],
                           bn_states[f"enc.bn{i}"], mask, training)
        else:
            h = mul(h, mask)
        h = relu(h)
        h = dropout(h, cfg.dropout, rng, training)
    pooled = global_max_pool_time(h, lengths)
    hid = linear(pooled, params["enc.fc.w"], params["enc.fc.b"], "relu")
    mu = linear(hid, params["enc.mu.w"], params["enc.mu.b"])
    log_var = clip(linear(hid, params["enc.lv.w"], params["enc.lv.b"]), LOG_VAR_MIN, LOG_VAR_MAX)
    if single:
        mu, log_var = reshape(mu, (cfg.d_z,)), reshape(log_var, (cfg.d_z,))
    return PosteriorParams(mu, log_var)


def reparameterize(post, eps):
    """z = mu + exp(0.5 * log_var) * eps, differentiable in mu and log_var."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise DimensionError(f"reparameterize: eps {eps.shape} vs mu {post.mu.shape}")
    return add(post.mu, mul(exp(mul(post.log_var, 0.5)), eps))
