"""Semi-teacher-forced training with Adam, KL annealing and checkpoints.

Reproducibility contract: (config, seed) determines the whole trajectory.
All randomness (shuffling, posterior samples, teacher-forcing noise,
dropout) comes from one generator whose state is checkpointed.  At every
epoch boundary parameters, Adam moments and batch-norm statistics are rounded
to float32, the precision checkpoints store, so resuming from a checkpoint
continues bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import dataclass_from_kv, dataclass_to_kv
from .decoder import semi_teacher_force  # noqa: F401  (re-exported)
from .errors import ConfigError, DivergenceError, FormatError
from .model import FeatureNorm, ModelConfig, Noise, VAELoop, make_batch
from .numerics import Tape, no_grad
from .objective import (AnnealSchedule, LossBreakdown, anneal_lambda, append_log_row,
                        total_loss)

log = logging.getLogger(__name__)

LEARNING_RATE_GRID = (1e-3, 1e-4, 5e-5, 1e-5)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    total_epochs: int = 150
    anneal_fraction: float = 0.1
    batch_size: int = 16
    seed: int = 0
    stf_noise_scale: float = 1.0
    grad_clip: float = 5.0
    normalize: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be at least 1, got {self.total_epochs}")
        if not 0.0 <= self.anneal_fraction <= 1.0:
            raise ConfigError(f"anneal_fraction must lie in [0, 1], got {self.anneal_fraction}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.stf_noise_scale < 0:
            raise ConfigError(f"stf_noise_scale must be >= 0, got {self.stf_noise_scale}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")

    @property
    def mode(self):
        return self.model.mode

    @property
    def schedule(self):
        return AnnealSchedule.from_fraction(self.anneal_fraction, self.total_epochs)

    def to_kv(self):
        kv = dataclass_to_kv(self, "train.")
        kv.update(dataclass_to_kv(self.model, "model."))
        return kv

    @classmethod
    def from_kv(cls, kv):
        train = {k: v for k, v in kv.items() if k.startswith("train.")}
        model = {k: v for k, v in kv.items() if k.startswith("model.")}
        cfg = dataclass_from_kv(_TrainFields, train, "train.")
        return cls(model=dataclass_from_kv(ModelConfig, model, "model."), **vars(cfg))


@dataclass
class _TrainFields:
    learning_rate: float = 1e-3
    total_epochs: int = 150
    anneal_fraction: float = 0.1
    batch_size: int = 16
    seed: int = 0
    stf_noise_scale: float = 1.0
    grad_clip: float = 5.0
    normalize: bool = True


# ----------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of ``params`` (name -> array, in place).

    Returns (params, state).  A non-finite gradient aborts before any update.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients down together when their joint L2 norm exceeds max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


# ----------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    model: VAELoop
    adam: AdamState
    epoch: int
    rng_state: dict
    best_val: float = math.inf

    def to_parts(self):
        kv = self.config.to_kv()
        kv["state.epoch"] = str(self.epoch)
        kv["state.adam_step"] = str(self.adam.step)
        kv["state.rng"] = json.dumps(self.rng_state, sort_keys=True, separators=(",", ":"))
        kv["state.best_val"] = repr(float(self.best_val))
        records = {}
        for name, p in self.model.params.items():
            records[f"param/{name}"] = p.data
        for name in self.model.params:
            records[f"adam.m/{name}"] = self.adam.m[name]
            records[f"adam.v/{name}"] = self.adam.v[name]
        for name, st in self.model.bn_states.items():
            records[f"bn.mean/{name}"] = st.mean
            records[f"bn.var/{name}"] = st.var
        records["norm/mean"] = self.model.norm.mean
        records["norm/std"] = self.model.norm.std
        return kv, records

    def save(self, path):
        write_checkpoint(path, *self.to_parts())

    @classmethod
    def from_parts(cls, kv, records):
        state = {k: kv.pop(k) for k in list(kv) if k.startswith("state.")}
        try:
            config = TrainConfig.from_kv(kv)
            model = VAELoop(config.model)
            for name, p in model.params.items():
                arr = records[f"param/{name}"]
                if arr.shape != p.shape:
                    raise FormatError(f"record param/{name} has shape {arr.shape}, "
                                      f"expected {p.shape}")
                p.data = arr.copy()
            adam = AdamState({n: records[f"adam.m/{n}"].copy() for n in model.params},
                             {n: records[f"adam.v/{n}"].copy() for n in model.params},
                             int(state["state.adam_step"]))
            for name, st in model.bn_states.items():
                st.mean = records[f"bn.mean/{name}"].copy()
                st.var = records[f"bn.var/{name}"].copy()
            model.norm = FeatureNorm(records["norm/mean"].copy(), records["norm/std"].copy())
            return cls(config, model, adam, int(state["state.epoch"]),
                       json.loads(state["state.rng"]), float(state["state.best_val"]))
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing {exc.args[0]}") from None

    @classmethod
    def load(cls, path):
        return cls.from_parts(*read_checkpoint(path))

    def copy(self):
        kv, records = self.to_parts()
        return Checkpoint.from_parts(dict(kv), {k: np.array(v) for k, v in records.items()})


def quantize_state(model, adam):
    """Round trainable state to float32 precision (what checkpoints store)."""
    for p in model.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for d in (adam.m, adam.v):
        for n in d:
            d[n] = d[n].astype(np.float32).astype(np.float64)
    for st in model.bn_states.values():
        st.mean = st.mean.astype(np.float32).astype(np.float64)
        st.var = st.var.astype(np.float32).astype(np.float64)


# ----------------------------------------------------------------------
# batching and evaluation

def epoch_batches(n_items, lengths, batch_size, rng, bucket=8):
    """Shuffled batches of indices with similar lengths grouped together.

    Indices are permuted, cut into chunks of ``bucket`` batches, sorted by
    length inside each chunk and split into batches; batch order is then
    shuffled again.
    """
    order = rng.permutation(n_items)
    chunk = batch_size * bucket
    batches = []
    for start in range(0, n_items, chunk):
        part = order[start:start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _sorted_batches(utterances, batch_size):
    lengths = np.array([u.n_frames for u in utterances])
    order = np.argsort(lengths, kind="stable")
    return [[utterances[i] for i in order[s:s + batch_size]]
            for s in range(0, len(order), batch_size)]


def evaluate(model, utterances, stf_noise_scale, seed=0, batch_size=64, lam=1.0,
             use_posterior_noise=True):
    """Mean LossBreakdown over ``utterances`` under semi-teacher-forcing.

    Noise (posterior samples and teacher-forcing noise) is drawn from a
    generator seeded with ``seed``, so repeated calls agree exactly.  Models
    without a latent report ``kl_term=None``.
    """
    if isinstance(model, Checkpoint):
        model = model.model
    if not utterances:
        raise ValueError("cannot evaluate an empty split")
    rng = np.random.default_rng(seed)
    recs, kls = [], []
    cfg = model.cfg
    with no_grad():
        for group in _sorted_batches(utterances, batch_size):
            batch = make_batch(group, cfg.n_speakers)
            noise = Noise.draw(rng, batch, cfg, stf_noise_scale, dropout=False)
            if not use_posterior_noise:
                noise.eps[:] = 0.0
            _, rec, kl = model.loss(batch, lam, noise, training=False)
            recs.append(rec)
            if kl is not None:
                kls.append(kl)
    rec = float(np.concatenate(recs).mean())
    kl = float(np.concatenate(kls).mean()) if kls else None
    return total_loss(rec, kl, lam)


# ----------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list

    def __iter__(self):
        return iter((self.final, self.log))


class Trainer:
    """Owns the model, optimizer state and RNG; one instance per run."""

    def __init__(self, config, train_set, val_set, resume=None):
        if not train_set:
            raise ValueError("training set is empty")
        self.config = config
        self.train_set = list(train_set)
        self.val_set = list(val_set)
        if resume is None:
            norm = (FeatureNorm.from_utterances(self.train_set) if config.normalize
                    else FeatureNorm.identity(config.model.d_x))
            self.model = VAELoop(config.model, seed=config.seed, norm=norm)
            self.adam = AdamState.zeros_like({n: p.data for n, p in self.model.params.items()})
            self.rng = np.random.default_rng([config.seed, 1])
            self.epoch = 0
            self.best_val = math.inf
            quantize_state(self.model, self.adam)
        else:
            ckpt = resume.copy()
            self.config = ckpt.config
            self.model, self.adam, self.epoch = ckpt.model, ckpt.adam, ckpt.epoch
            self.best_val = ckpt.best_val
            self.rng = np.random.default_rng()
            self.rng.bit_generator.state = ckpt.rng_state
        self.best = None
        self._lengths = np.array([u.n_frames for u in self.train_set])

    def checkpoint(self):
        return Checkpoint(self.config, self.model, self.adam, self.epoch,
                          self.rng.bit_generator.state, self.best_val).copy()

    def train_epoch(self):
        cfg, mcfg = self.config, self.config.model
        names = self.model.trainable_names()
        params = self.model.params
        leaves = [params[n] for n in names]
        batches = epoch_batches(len(self.train_set), self._lengths, cfg.batch_size, self.rng)
        sched = cfg.schedule
        sums = np.zeros(3)
        count = 0
        for b, idx in enumerate(batches):
            lam = anneal_lambda(self.epoch + b / len(batches), sched)
            batch = make_batch([self.train_set[i] for i in idx], mcfg.n_speakers)
            noise = Noise.draw(self.rng, batch, mcfg, cfg.stf_noise_scale)
            with Tape() as tape:
                loss, rec, kl = self.model.loss(batch, lam, noise, training=True)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {self.epoch}, batch {b}")
            grads = tape.backward(loss, wrt=leaves)
            grads, _ = clip_by_global_norm({n: grads[p] for n, p in zip(names, leaves)},
                                           cfg.grad_clip)
            adam_step({n: params[n].data for n in names}, grads, self.adam,
                      cfg.learning_rate)
            for n in names:
                if not np.isfinite(params[n].data).all():
                    raise DivergenceError(f"parameter {n!r} became non-finite at epoch "
                                          f"{self.epoch}, batch {b}")
            kl_sum = 0.0 if kl is None else kl.sum()
            sums += (rec.sum(), kl_sum, lam * len(idx))
            count += len(idx)
        self.epoch += 1
        quantize_state(self.model, self.adam)
        rec, kl, lam = sums / count
        return total_loss(rec, None if not self.config.model.uses_latent else kl, lam)

    def validate(self):
        """Validation loss with lambda = 1 and teacher-forcing noise off."""
        return evaluate(self.model, self.val_set, 0.0, seed=0, use_posterior_noise=False)

    def run(self, epochs=None, log_path=None, checkpoint_path=None, best_path=None):
        """Train until ``total_epochs`` (or for ``epochs`` more epochs)."""
        end = self.config.total_epochs if epochs is None else min(
            self.config.total_epochs, self.epoch + epochs)
        rows = []
        best = None
        while self.epoch < end:
            train_bd = self.train_epoch()
            epoch = self.epoch - 1
            rows.append((epoch, train_bd, "train"))
            if log_path:
                append_log_row(log_path, epoch, train_bd, "train")
            if self.val_set:
                val_bd = self.validate()
                rows.append((epoch, val_bd, "validation"))
                if log_path:
                    append_log_row(log_path, epoch, val_bd, "validation")
                if val_bd.total < self.best_val:
                    self.best_val = val_bd.total
                    best = self.checkpoint()
                    if best_path:
                        best.save(best_path)
                log.info("epoch %d: train %.4f val %.4f (rec %.4f kl %s)", epoch,
                         train_bd.total, val_bd.total, val_bd.rec_error, val_bd.kl_term)
            if checkpoint_path:
                self.checkpoint().save(checkpoint_path)
        final = self.checkpoint()
        if best is not None:
            self.best = best
        return TrainResult(final, self.best or final, rows)


def train(config, train_set, val_set, *, resume=None, epochs=None, log_path=None,
          checkpoint_path=None, best_path=None):
    """Train a model; returns a TrainResult (unpacks as ``final, log``)."""
    trainer = Trainer(config, train_set, val_set, resume=resume)
    return trainer.run(epochs=epochs, log_path=log_path, checkpoint_path=checkpoint_path,
                       best_path=best_path)


__all__ = [
    "AdamState", "Checkpoint", "LEARNING_RATE_GRID", "LossBreakdown", "TrainConfig",
    "TrainResult", "Trainer", "adam_step", "clip_by_global_norm", "epoch_batches",
    "evaluate", "quantize_state", "semi_teacher_force", "train",
]
