"""Annealed negative ELBO: reconstruction error plus lambda-weighted KL term.

The decoder likelihood is a unit-variance Gaussian, so its negative log
density is half the squared error plus a constant.  Constants and the half are
dropped: the reconstruction term is plain squared error summed over feature
dimensions and averaged over frames.  The KL term is reported on the same
per-frame scale (divided by the sequence length), so a sequence's total is its
negative objective divided by its length.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import Tensor, add, as_tensor, exp, mul, record1, square, sub, sum


@dataclass(frozen=True)
class AnnealSchedule:
    anneal_epochs: int
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")
        if not 0 <= self.anneal_epochs <= self.total_epochs:
            raise ValueError(f"anneal_epochs must lie in [0, {self.total_epochs}], "
                             f"got {self.anneal_epochs}")

    @classmethod
    def from_fraction(cls, fraction, total_epochs):
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"anneal fraction must lie in [0, 1], got {fraction}")
        return cls(int(round(fraction * total_epochs)), total_epochs)


def anneal_lambda(epoch, sched):
    """KL weight at (possibly fractional) ``epoch``: 0 at the start, linear to 1.

    With ``anneal_epochs == 0`` annealing is disabled and the weight is 1.
    """
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    if sched.anneal_epochs == 0:
        return 1.0
    return min(1.0, epoch / sched.anneal_epochs)


def kl_gaussian_prior(mu, log_var=None):
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over the last axis.

    Accepts a PosteriorParams or (mu, log_var) tensors; differentiable.
    """
    if log_var is None:
        mu, log_var = mu.mu, mu.log_var
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise DimensionError(f"kl_gaussian_prior: mu {mu.shape} vs log_var {log_var.shape}")
    terms = sub(sub(add(square(mu), exp(log_var)), 1.0), log_var)
    return mul(sum(terms, axis=-1), 0.5)


def reconstruction_error(x_hat_seq, x_seq):
    """(1/T) * sum_t ||x_hat_t - x_t||^2 for one sequence of shape [T, d_x]."""
    x_hat_seq, x_seq = as_tensor(x_hat_seq), as_tensor(x_seq)
    if x_hat_seq.shape != x_seq.shape:
        raise DimensionError(f"reconstruction_error: prediction {x_hat_seq.shape} "
                             f"vs target {x_seq.shape}")
    if x_seq.ndim != 2 or x_seq.shape[0] == 0:
        raise DimensionError(f"reconstruction_error expects [T, d_x] with T >= 1, "
                             f"got {x_seq.shape}")
    return mul(sum(square(sub(x_hat_seq, x_seq))), 1.0 / x_seq.shape[0])


def masked_reconstruction_error(preds, targets, lengths):
    """Per-sequence reconstruction error for a padded batch.

    preds: list of T_max tensors [B, d_x]; targets: [B, T_max, d_x];
    lengths: valid frames per row.  Returns a [B] tensor.
    """
    targets = np.asarray(targets, dtype=np.float64)
    lengths = np.asarray(lengths)
    B, T, dx = targets.shape
    if len(preds) != T:
        raise DimensionError(f"masked_reconstruction_error: {len(preds)} predictions "
                             f"for {T} target frames")
    pred = np.stack([p.data for p in preds], axis=1)
    mask = (np.arange(T)[None, :] < lengths[:, None])[:, :, None]
    scale = (1.0 / lengths)[:, None, None]
    diff = (pred - targets) * mask
    rec = (diff * diff).sum(axis=(1, 2)) / lengths

    def bw(g):
        gd = 2.0 * diff * scale * g[:, None, None]
        return tuple(gd[:, t] for t in range(T))
    return record1(rec, tuple(preds), bw)


@dataclass
class LossBreakdown:
    """Loss components on a per-frame scale.

    ``kl_term`` is None for models without a latent code.
    """

    rec_error: float
    kl_term: float | None
    lam: float
    total: float

    def as_row(self):
        return {
            "lambda": self.lam,
            "rec_error": self.rec_error,
            "kl_term": "NA" if self.kl_term is None else self.kl_term,
            "total": self.total,
        }


def total_loss(rec, kl, lam):
    """Combine components: total = rec + lam * kl (kl None means no latent)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if kl is None:
        return LossBreakdown(float(rec), None, float(lam), float(rec))
    if kl < 0:
        raise ValueError(f"KL term must be non-negative, got {kl}")
    return LossBreakdown(float(rec), float(kl), float(lam), float(rec + lam * kl))


LOG_COLUMNS = ["epoch", "lambda", "rec_error", "kl_term", "total", "split"]


def append_log_row(path, epoch, breakdown, split):
    """Append one row to a training-log CSV, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow({"epoch": epoch, "split": split, **_repr_row(breakdown.as_row())})


def _repr_row(row):
    return {k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
            for k, v in row.items()}


def format_log_rows(rows):
    """Render (epoch, breakdown, split) triples as CSV text with a header."""
    lines = [",".join(LOG_COLUMNS)]
    for epoch, bd, split in rows:
        r = _repr_row(bd.as_row())
        lines.append(",".join(str(x) for x in
                              (epoch, r["lambda"], r["rec_error"], r["kl_term"], r["total"],
                               split)))
    return "\n".join(lines) + "\n"


def read_log(path):
    """Parse a training-log CSV into a list of dicts with numeric fields."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kl = row["kl_term"]
            out.append({
                "epoch": int(row["epoch"]),
                "lambda": float(row["lambda"]),
                "rec_error": float(row["rec_error"]),
                "kl_term": None if kl == "NA" else float(kl),
                "total": float(row["total"]),
                "split": row["split"],
            })
    return out


def is_finite(x):
    return math.isfinite(x.item() if isinstance(x, Tensor) else float(x))
