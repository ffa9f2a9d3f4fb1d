"""Model configuration, parameter initialization and the batched loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import decoder, encoder
from .errors import ConfigError
from .numerics import BatchNormState, Tensor, add, embedding, mean, mul, no_grad
from .objective import kl_gaussian_prior, masked_reconstruction_error

MODES = ("vae-loop", "baseline-no-z", "baseline-labeled")


@dataclass
class ModelConfig:
    vocab_size: int = 20
    d_x: int = 8
    d_buf: int = 32
    k: int = 6
    d_p: int = 24
    d_z: int = 64
    d_s: int = 16
    n_speakers: int = 1
    hidden: int = 128
    att_components: int = 5
    att_hidden: int = 64
    enc_channels: tuple = (32, 32, 64, 64, 128)
    enc_kernel: int = 5
    enc_stride: int = 2
    enc_hidden: int = 128
    dropout: float = 0.2
    batchnorm: bool = True
    mode: str = "vae-loop"
    att_init_step: float = 0.125

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("vocab_size", "d_x", "d_buf", "k", "d_p", "d_z", "d_s", "n_speakers",
                     "hidden", "att_components", "att_hidden", "enc_kernel", "enc_stride",
                     "enc_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.enc_channels:
            raise ConfigError("enc_channels must name at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mode == "baseline-labeled" and self.n_speakers < 2:
            raise ConfigError("baseline-labeled mode needs n_speakers >= 2")

    @property
    def uses_latent(self):
        return self.mode == "vae-loop"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def init_params(cfg, rng):
    """Fresh parameters as an ordered name -> Tensor dict (all require grad)."""
    p = {}

    def dense(name, fan_in, fan_out, gain=np.sqrt(2.0)):
        p[f"{name}.w"] = rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out))
        p[f"{name}.b"] = np.zeros(fan_out)

    c_in = cfg.d_x
    for i, c_out in enumerate(cfg.enc_channels):
        fan = c_in * cfg.enc_kernel
        p[f"enc.conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan), (c_out, c_in, cfg.enc_kernel))
        p[f"enc.conv{i}.b"] = np.zeros(c_out)
        if cfg.batchnorm:
            p[f"enc.bn{i}.gamma"] = np.ones(c_out)
            p[f"enc.bn{i}.beta"] = np.zeros(c_out)
        c_in = c_out
    dense("enc.fc", c_in, cfg.enc_hidden)
    dense("enc.mu", cfg.enc_hidden, cfg.d_z, gain=1.0)
    dense("enc.lv", cfg.enc_hidden, cfg.d_z, gain=0.1)

    kd = cfg.k * cfg.d_buf
    p["dec.phon_emb"] = rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.d_p))
    p["dec.spk_emb"] = rng.normal(0.0, 0.1, (cfg.n_speakers, cfg.d_s))
    dense("dec.fu", cfg.d_s, cfg.d_p, gain=1.0)
    dense("dec.fo", cfg.d_s, cfg.d_buf, gain=1.0)
    dense("dec.nu1", kd + cfg.d_p + cfg.d_x + cfg.d_z, cfg.hidden)
    dense("dec.nu2", cfg.hidden, cfg.d_buf, gain=0.5)
    dense("dec.no1", kd, cfg.hidden)
    dense("dec.no2", cfg.hidden, cfg.d_x, gain=1.0)
    dense("att.q1", kd, cfg.att_hidden)
    dense("att.q2", cfg.att_hidden, 3 * cfg.att_components, gain=0.1)
    K = cfg.att_components
    p["att.q2.b"][2 * K:] = np.log(np.expm1(cfg.att_init_step))
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in p.items()}


def init_bn_states(cfg):
    if not cfg.batchnorm:
        return {}
    return {f"enc.bn{i}": BatchNormState(c) for i, c in enumerate(cfg.enc_channels)}


@dataclass
class Batch:
    """Padded batch of utterances."""

    phonemes: np.ndarray      # [B, L] int
    ph_lengths: np.ndarray    # [B]
    frames: np.ndarray        # [B, T, d_x]
    lengths: np.ndarray       # [B]
    speakers: np.ndarray      # [B] int
    factors: np.ndarray = field(default=None)

    @property
    def size(self):
        return len(self.lengths)


def make_batch(utterances, n_speakers=1):
    B = len(utterances)
    L = max(len(u.phonemes) for u in utterances)
    T = max(u.n_frames for u in utterances)
    d_x = utterances[0].frames.shape[1]
    ph = np.zeros((B, L), dtype=np.int64)
    fr = np.zeros((B, T, d_x))
    for i, u in enumerate(utterances):
        ph[i, :len(u.phonemes)] = u.phonemes
        fr[i, :u.n_frames] = u.frames
    factors = np.array([u.factor for u in utterances])
    return Batch(ph, np.array([len(u.phonemes) for u in utterances]), fr,
                 np.array([u.n_frames for u in utterances]),
                 speaker_labels(factors, n_speakers), factors)


def speaker_labels(factors, n_speakers):
    """Pseudo-speaker ids: the hidden factor binned into ``n_speakers`` equal bins.

    Only the labeled baseline uses more than one speaker; it stands in for
    a model given oracle speaker labels.
    """
    if n_speakers == 1:
        return np.zeros(len(factors), dtype=np.int64)
    edges = np.linspace(-1.0, 1.0, n_speakers + 1)[1:-1]
    return np.digitize(factors, edges).astype(np.int64)


@dataclass
class FeatureNorm:
    """Per-channel standardization of acoustic frames.

    Models see frames as ``(x - mean) / std``; squared errors and KL terms are
    therefore measured in units of each channel's spread in the training data.
    Stats are rounded to float32 so they survive checkpoints unchanged.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, d_x):
        return cls(np.zeros(d_x), np.ones(d_x))

    @classmethod
    def from_utterances(cls, utterances, floor=1e-3):
        frames = np.concatenate([u.frames for u in utterances])
        mean = frames.mean(axis=0)
        std = np.maximum(frames.std(axis=0), floor)
        as32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
        return cls(as32(mean), as32(std))

    def apply(self, frames, lengths=None):
        """Normalize [..., T, d_x] frames; padding past ``lengths`` stays zero."""
        out = (np.asarray(frames) - self.mean) / self.std
        if lengths is not None:
            T = out.shape[-2]
            out = out * (np.arange(T)[None, :] < np.asarray(lengths)[:, None])[..., None]
        return out

    def invert(self, frames):
        return np.asarray(frames) * self.std + self.mean


@dataclass
class Noise:
    """All random draws of one training/evaluation pass over a batch."""

    eps: np.ndarray        # [B, d_z]
    eta: np.ndarray        # [B, T, d_x]
    rng: np.random.Generator = None   # dropout

    @classmethod
    def draw(cls, rng, batch, cfg, stf_scale, dropout=True):
        eps = rng.standard_normal((batch.size, cfg.d_z))
        eta = stf_scale * rng.standard_normal(batch.frames.shape) if stf_scale > 0 \
            else np.zeros(batch.frames.shape)
        return cls(eps, eta, rng if dropout else None)


class VAELoop:
    """Parameters, batch-norm statistics and configuration of one model."""

    def __init__(self, cfg, params=None, bn_states=None, seed=0, norm=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        self.bn_states = bn_states if bn_states is not None else init_bn_states(cfg)
        self.norm = norm if norm is not None else FeatureNorm.identity(cfg.d_x)

    def encoder_param_names(self):
        return [n for n in self.params if n.startswith("enc.")]

    def trainable_names(self):
        names = list(self.params)
        if not self.cfg.uses_latent:
            names = [n for n in names if not n.startswith("enc.")]
        return names

    def speaker_vectors(self, speakers):
        return embedding(self.params["dec.spk_emb"], speakers)

    def posterior(self, batch, training=False, rng=None):
        frames = self.norm.apply(batch.frames, batch.lengths)
        return encoder.encode(self.params, self.cfg, frames, batch.lengths,
                              training=training, rng=rng, bn_states=self.bn_states)

    def encode_utterances(self, utterances, batch_size=64):
        """Posterior (mu, sigma) arrays [N, d_z] for each utterance, in eval mode."""
        mus, sigmas = [], []
        with no_grad():
            for start in range(0, len(utterances), batch_size):
                batch = make_batch(utterances[start:start + batch_size], self.cfg.n_speakers)
                post = self.posterior(batch)
                mus.append(post.mu.data)
                sigmas.append(post.sigma)
        return np.concatenate(mus), np.concatenate(sigmas)

    def loss(self, batch, lam, noise, training):
        """Mean over the batch of rec + lam * KL/T.

        Returns (loss Tensor, per-row rec array, per-row KL/T array or None).
        """
        cfg = self.cfg
        frames = self.norm.apply(batch.frames, batch.lengths)
        emb = embedding(self.params["dec.phon_emb"], batch.phonemes)
        s = self.speaker_vectors(batch.speakers)
        kl_rows = None
        if cfg.uses_latent:
            post = encoder.encode(self.params, cfg, frames, batch.lengths, training=training,
                                  rng=noise.rng, bn_states=self.bn_states)
            z = encoder.reparameterize(post, noise.eps)
            kl_rows = mul(kl_gaussian_prior(post), 1.0 / batch.lengths)
        else:
            z = Tensor._wrap(np.zeros((batch.size, cfg.d_z)))
        preds, _, _ = decoder.run_decoder(self.params, cfg, emb, batch.ph_lengths, z, s,
                                          frames.shape[1], targets=frames, eta=noise.eta)
        rec = masked_reconstruction_error(preds, frames, batch.lengths)
        per_row = rec if kl_rows is None else add(rec, mul(kl_rows, lam))
        total = mean(per_row)
        return total, rec.data.copy(), (None if kl_rows is None else kl_rows.data.copy())
