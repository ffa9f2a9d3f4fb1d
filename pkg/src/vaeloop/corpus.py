"""Synthetic speech-like corpus with a hidden global style factor.

Each utterance has a factor ``g`` in [-1, 1] that the model never sees.
Channel 0 plays the role of pitch: a per-phoneme base level, shifted by
``0.5 * g`` and modulated by a sinusoid of amplitude ``0.2 * |g|``, so ``g``
moves both the level and the size of the fluctuation.  The remaining channels
carry a fixed noisy encoding of the current phoneme.  The phoneme table
(base levels and encodings) depends only on ``table_seed``, so corpora drawn
with different seeds share one "language".  Phoneme durations are
random, so alignment has to be learned.

Frames are rounded to float32 precision at generation time, which makes the
dataset file format (float32 frames) lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

PITCH_CHANNEL = 0
DATASET_MAGIC = b"VLD1"
DATASET_VERSION = 1
N_TEST = 50


@dataclass
class Utterance:
    phonemes: np.ndarray    # [L] int
    frames: np.ndarray      # [T, d_x] float64 (float32-representable)
    factor: float           # hidden g, evaluation only

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def same_as(self, other):
        return (self.factor == other.factor
                and np.array_equal(self.phonemes, other.phonemes)
                and self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames))


@dataclass
class CorpusConfig:
    count: int = 1050
    vocab_size: int = 20
    d_x: int = 8
    frames_per_phoneme: tuple = (4, 12)
    phonemes_per_utterance: tuple = (4, 10)
    noise: float = 0.25
    seed: int = 0
    min_frames: int = 32
    max_frames: int = 250
    level_shift: float = 0.5
    fluctuation: float = 0.2
    period: float = 16.0
    base_range: float = 0.25
    encoding_scale: float = 0.3
    table_seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.vocab_size < 1 or self.d_x < 2:
            raise ValueError("count and vocab_size must be positive and d_x at least 2")
        lo, hi = self.frames_per_phoneme
        if not 1 <= lo <= hi:
            raise ValueError(f"bad frames_per_phoneme range {self.frames_per_phoneme}")
        lo, hi = self.phonemes_per_utterance
        if not 1 <= lo <= hi:
            raise ValueError(f"bad phonemes_per_utterance range {self.phonemes_per_utterance}")
        if hi * self.frames_per_phoneme[1] < self.min_frames:
            raise ValueError("utterances can never reach min_frames with these ranges")


@dataclass
class PhonemeTable:
    base_pitch: np.ndarray     # [V]
    encodings: np.ndarray      # [V, d_x - 1]

    @classmethod
    def from_config(cls, cfg):
        rng = np.random.default_rng([cfg.table_seed, 0xC0DE])
        base = rng.uniform(-cfg.base_range, cfg.base_range, cfg.vocab_size)
        enc = rng.normal(0.0, cfg.encoding_scale, (cfg.vocab_size, cfg.d_x - 1))
        return cls(base, enc)


def render_frames(phonemes, factor, noise_seed, cfg, table):
    """Frames for one utterance; deterministic in (phonemes, factor, noise_seed)."""
    rng = np.random.default_rng(noise_seed)
    lo, hi = cfg.frames_per_phoneme
    durations = rng.integers(lo, hi + 1, len(phonemes))
    per_frame = np.repeat(np.asarray(phonemes), durations)
    T = len(per_frame)
    t = np.arange(T)
    frames = np.empty((T, cfg.d_x))
    frames[:, PITCH_CHANNEL] = (table.base_pitch[per_frame] + cfg.level_shift * factor
                                + cfg.fluctuation * abs(factor)
                                * np.sin(2 * np.pi * t / cfg.period))
    frames[:, 1:] = table.encodings[per_frame]
    frames += cfg.noise * rng.standard_normal(frames.shape)
    return frames.astype(np.float32).astype(np.float64)


def generate_corpus(cfg):
    """``cfg.count`` utterances whose frame counts lie in [min_frames, max_frames]."""
    table = PhonemeTable.from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    out = []
    lo, hi = cfg.phonemes_per_utterance
    while len(out) < cfg.count:
        g = float(np.float32(rng.uniform(-1.0, 1.0)))
        n = int(rng.integers(lo, hi + 1))
        phonemes = rng.integers(0, cfg.vocab_size, n)
        noise_seed = int(rng.integers(0, 2**63 - 1))
        frames = render_frames(phonemes, g, noise_seed, cfg, table)
        if cfg.min_frames <= len(frames) <= cfg.max_frames:
            out.append(Utterance(phonemes.astype(np.int64), frames, g))
    return out


def split(corpus, seed, n_test=N_TEST):
    """Hold out ``n_test`` utterances, then split the rest 90/10 into train/validation.

    Each split keeps the corpus order.  Returns (train, validation, test).
    """
    n = len(corpus)
    if n <= n_test:
        raise ValueError(f"corpus of {n} utterances is too small; need more than {n_test}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    test_idx = np.sort(order[:n_test])
    rest = rng.permutation(order[n_test:])
    n_train = (9 * len(rest)) // 10
    train_idx = np.sort(rest[:n_train])
    val_idx = np.sort(rest[n_train:])
    pick = lambda idx: [corpus[i] for i in idx]  # noqa: E731
    return pick(train_idx), pick(val_idx), pick(test_idx)


_HEADER = struct.Struct("<4sIII")


def save_dataset(path, corpus):
    """Write VLD1: magic, version, utterance count, d_x, then one record per utterance
    (g f64, phoneme count u32, ids u16, T u32, frames f32), all little-endian."""
    d_x = corpus[0].frames.shape[1] if corpus else 0
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(corpus), d_x)]
    for u in corpus:
        if u.frames.shape[1] != d_x:
            raise ValueError("all utterances must share d_x")
        ids = np.asarray(u.phonemes)
        if ids.size and (ids.min() < 0 or ids.max() > 0xFFFF):
            raise ValueError("phoneme ids must fit in u16")
        parts.append(struct.pack("<dI", float(u.factor), len(ids)))
        parts.append(ids.astype("<u2").tobytes())
        parts.append(struct.pack("<I", u.n_frames))
        parts.append(u.frames.astype("<f4").tobytes())
    data = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(data)


def dataset_size(corpus):
    """Exact byte size of the VLD1 encoding of ``corpus``."""
    d_x = corpus[0].frames.shape[1] if corpus else 0
    return _HEADER.size + sum(8 + 4 + 2 * len(u.phonemes) + 4 + 4 * u.n_frames * d_x
                              for u in corpus)


def load_dataset(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_dataset(data)


def parse_dataset(data):
    reader = _Reader(data)
    magic, version, count, d_x = reader.unpack(_HEADER, "header")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    out = []
    for i in range(count):
        g, n_ph = reader.unpack(struct.Struct("<dI"), f"utterance {i} header")
        ids = reader.array("<u2", n_ph, f"utterance {i} phonemes").astype(np.int64)
        (T,) = reader.unpack(struct.Struct("<I"), f"utterance {i} frame count")
        frames = reader.array("<f4", T * d_x, f"utterance {i} frames")
        out.append(Utterance(ids, frames.astype(np.float64).reshape(T, d_x), g))
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes after last record",
                          reader.pos)
    return out


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def _need(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)

    def unpack(self, st, what):
        self._need(st.size, what)
        out = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return out

    def array(self, dtype, count, what):
        n = np.dtype(dtype).itemsize * count
        self._need(n, what)
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += n
        return out
