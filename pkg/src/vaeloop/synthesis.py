"""Free-running generation, latent sampling and interpolation.

At inference the decoder feeds back its own previous output and emits the
predicted mean frame, so a synthesis is a deterministic function of the
phonemes, the latent code and the parameters.  Randomness only enters
through :func:`sample_prior`.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .attention import has_terminated
from .decoder import run_decoder
from .errors import DimensionError, EmptySequenceError, FormatError
from .numerics import Tensor, embedding, no_grad

SEQUENCE_MAGIC = b"VLSQ"
_SEQ_HEADER = struct.Struct("<4sII")

# Backstop length per phoneme when max_frames is not given.  Training
# phonemes last at most 12 frames, so this never cuts a normal synthesis short.
FRAMES_PER_PHONEME_LIMIT = 16


@dataclass
class SynthesisConfig:
    sigma: float = 1.0
    max_frames: int | None = None
    seed: int = 0
    margin: float = 0.5

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.max_frames is not None and self.max_frames < 1:
            raise ValueError(f"max_frames must be at least 1, got {self.max_frames}")

    def frame_limit(self, n_phonemes):
        if self.max_frames is not None:
            return self.max_frames
        return FRAMES_PER_PHONEME_LIMIT * n_phonemes


def sample_prior(d_z, sigma, rng):
    """``z = sigma * eps`` with standard normal ``eps``; sigma = 0 gives exact zeros."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(d_z)
    return sigma * rng.standard_normal(d_z)


def interpolate_z(z1, z2, alpha):
    """``(1 - alpha) * z1 + alpha * z2`` for alpha in [0, 1]."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise DimensionError(f"latent codes differ in shape: {z1.shape} vs {z2.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0:
        return z1.copy()
    if alpha == 1:
        return z2.copy()
    return (1.0 - alpha) * z1 + alpha * z2


def synthesize(phonemes, z, cfg, model, speaker=0):
    """Generate frames [T, d_x] for ``phonemes`` under latent ``z``.

    Stops once attention has moved past the last phoneme (see
    :func:`~vaeloop.attention.has_terminated`) or at the frame limit.
    ``model`` is a :class:`~vaeloop.model.VAELoop` or a training checkpoint.
    """
    model = getattr(model, "model", model)
    mcfg = model.cfg
    phonemes = np.asarray(phonemes, dtype=np.int64).reshape(-1)
    if phonemes.size == 0:
        raise EmptySequenceError("cannot synthesize an empty phoneme sequence")
    if phonemes.min() < 0 or phonemes.max() >= mcfg.vocab_size:
        raise ValueError(f"phoneme ids must lie in [0, {mcfg.vocab_size})")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape != (mcfg.d_z,):
        raise DimensionError(f"latent code has {z.size} entries, model expects {mcfg.d_z}")
    if not 0 <= speaker < mcfg.n_speakers:
        raise ValueError(f"speaker must lie in [0, {mcfg.n_speakers})")
    L = len(phonemes)
    with no_grad():
        emb = embedding(model.params["dec.phon_emb"], phonemes[None, :])
        s = embedding(model.params["dec.spk_emb"], np.array([speaker]))
        stop = lambda kappa, t: has_terminated(kappa, L, cfg.margin)  # noqa: E731
        outputs, _, _ = run_decoder(model.params, mcfg, emb, np.array([L]),
                                    Tensor._wrap(z[None, :]), s, cfg.frame_limit(L),
                                    stop=stop)
    frames = np.concatenate([o.data for o in outputs])
    return model.norm.invert(frames)


def trajectory_export(seq, channel, path=None):
    """Rows ``(t, value)`` of one channel; also written as CSV when ``path`` is given."""
    seq = np.asarray(seq)
    if seq.ndim != 2:
        raise DimensionError(f"expected a [T, d_x] sequence, got shape {seq.shape}")
    if not 0 <= channel < seq.shape[1]:
        raise ValueError(f"channel {channel} out of range for d_x={seq.shape[1]}")
    rows = [(t, float(v)) for t, v in enumerate(seq[:, channel])]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in rows:
                w.writerow([t, repr(v)])
    return rows


def save_sequence(path, seq):
    """VLSQ file: magic, T u32, d_x u32, then T*d_x float32, little-endian."""
    seq = np.asarray(seq)
    if seq.ndim != 2:
        raise DimensionError(f"expected a [T, d_x] sequence, got shape {seq.shape}")
    with open(path, "wb") as fh:
        fh.write(_SEQ_HEADER.pack(SEQUENCE_MAGIC, *seq.shape))
        fh.write(seq.astype("<f4").tobytes())


def load_sequence(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SEQ_HEADER.size:
        raise FormatError("truncated sequence header", len(data))
    magic, T, d_x = _SEQ_HEADER.unpack_from(data)
    if magic != SEQUENCE_MAGIC:
        raise FormatError(f"bad sequence magic {magic!r}, expected {SEQUENCE_MAGIC!r}", 0)
    need = _SEQ_HEADER.size + 4 * T * d_x
    if len(data) != need:
        raise FormatError(f"sequence body should be {need - _SEQ_HEADER.size} bytes, "
                          f"found {len(data) - _SEQ_HEADER.size}", _SEQ_HEADER.size)
    values = np.frombuffer(data, dtype="<f4", offset=_SEQ_HEADER.size)
    return values.astype(np.float64).reshape(T, d_x)
