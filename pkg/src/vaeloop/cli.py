"""Command-line entry point: ``vaeloop <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical divergence.  Diagnostics go to stderr; data goes to files
or stdout.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys

import numpy as np

from . import __version__
from .config import convert, read_kv_file
from .corpus import CorpusConfig, generate_corpus, load_dataset, save_dataset, split
from .errors import ConfigError, FormatError, InputTooShortError, NonFiniteError, VaeLoopError
from .model import MODES, ModelConfig
from .objective import LOG_COLUMNS, format_log_rows
from .synthesis import (SynthesisConfig, interpolate_z, load_sequence, sample_prior,
                        save_sequence, synthesize, trajectory_export)
from .training import Checkpoint, TrainConfig, Trainer, evaluate

log = logging.getLogger("vaeloop")

FORMATS = """\
file formats (all little-endian):
  VLD1  dataset: "VLD1", u32 version, u32 count, u32 d_x, then per utterance
        f64 g, u32 phoneme count, u16 ids, u32 T, T*d_x f32 frames
  VLCK  checkpoint: "VLCK", u32 version, u32 length + key=value text block,
        u32 record count, records of (u16 name length, name, u32 rank,
        u32 extents, f32 values)
  VLSQ  sequence: "VLSQ", u32 T, u32 d_x, T*d_x f32 frames
  config files: one key=value per line, keys are flag names without the
        leading dashes (dashes or underscores), model hyperparameters as
        model.<name>; '#' starts a comment; flags override file values"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(flag, cast=float, allow_zero=False):
    def parse(text):
        try:
            value = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}") from None
        ok = value >= 0 if allow_zero else value > 0
        if not ok or (isinstance(value, float) and not math.isfinite(value)):
            need = "non-negative" if allow_zero else "positive"
            raise argparse.ArgumentTypeError(f"{flag} must be {need}, got {text}")
        return value
    return parse


def _fraction(flag):
    def parse(text):
        value = _positive(flag, allow_zero=True)(text)
        if value > 1:
            raise argparse.ArgumentTypeError(f"{flag} must lie in [0, 1], got {text}")
        return value
    return parse


def _int_list(text):
    if text.startswith("@"):
        with open(text[1:]) as fh:
            text = fh.read()
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") \
            from None


def _float_list(text):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") \
            from None


def _add(p, *flags, **kw):
    """Like add_argument, but defaults stay None so config files can fill them."""
    default = kw.pop("default", None)
    help_text = kw.get("help", "")
    if default is not None:
        kw["help"] = f"{help_text} (default: {default})".strip()
    action = p.add_argument(*flags, default=None, **kw)
    p.set_defaults(**{f"_default_{action.dest}": default})
    return action


def build_parser():
    parser = _Parser(prog="vaeloop", description="Speech-like sequence VAE toolkit.",
                     epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=FORMATS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key=value file supplying defaults for flags")
        p.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
        return p

    p = command("gen-data", "generate a synthetic corpus and write it as VLD1")
    _add(p, "--out", help="output dataset path")
    _add(p, "--count", type=_positive("--count", int), default=1050, help="utterances")
    _add(p, "--seed", type=int, default=0, help="generator seed")
    _add(p, "--noise", type=_positive("--noise", allow_zero=True), default=0.25,
         help="additive frame noise amplitude")
    _add(p, "--vocab-size", type=_positive("--vocab-size", int), default=20)
    _add(p, "--d-x", type=_positive("--d-x", int), default=8, help="frame channels")

    p = command("train", "train a model on a VLD1 dataset")
    _add(p, "--data", help="VLD1 dataset; 50 utterances are held out, the rest split 90/10")
    _add(p, "--out", help="final checkpoint path (VLCK)")
    _add(p, "--best", help="best-validation checkpoint path (default: OUT.best)")
    _add(p, "--log", help="training log CSV (default: OUT.log.csv)")
    _add(p, "--epochs", type=_positive("--epochs", int), default=60)
    _add(p, "--anneal-frac", type=_fraction("--anneal-frac"), default=0.1,
         help="fraction of epochs over which the KL weight rises from 0 to 1")
    _add(p, "--lr", type=_positive("--lr"), default=1e-3, help="Adam learning rate")
    _add(p, "--seed", type=int, default=0, help="training and split seed")
    _add(p, "--mode", choices=MODES, default="vae-loop")
    _add(p, "--stf-noise", type=_positive("--stf-noise", allow_zero=True), default=1.0,
         help="scale of the semi-teacher-forcing noise")
    _add(p, "--batch-size", type=_positive("--batch-size", int), default=16)
    _add(p, "--n-speakers", type=_positive("--n-speakers", int), default=None,
         help="speaker bins for baseline-labeled (default 10 for that mode, else 1)")
    _add(p, "--resume", help="continue from this checkpoint")

    p = command("eval", "print held-out loss breakdowns as CSV")
    _add(p, "--checkpoint", help="VLCK checkpoint")
    _add(p, "--data", help="VLD1 dataset the model was trained on")
    _add(p, "--split", choices=("test", "validation", "train", "all"), default="test")
    _add(p, "--split-seed", type=int, help="split seed (default: the training seed)")
    _add(p, "--stf-noise", type=_positive("--stf-noise", allow_zero=True),
         help="teacher-forcing noise scale (default: the training value)")
    _add(p, "--seed", type=int, default=0, help="noise seed for evaluation")

    p = command("encode", "write posterior mean and std per utterance as CSV")
    _add(p, "--checkpoint", help="VLCK checkpoint")
    _add(p, "--data", help="VLD1 dataset")
    _add(p, "--out", help="CSV path (default: stdout)")

    p = command("synthesize", "generate frames for a phoneme sequence")
    _add(p, "--checkpoint", help="VLCK checkpoint")
    _add(p, "--phonemes", type=_int_list, help="comma-separated ids, or @file")
    _add(p, "--sigma", type=_positive("--sigma", allow_zero=True), default=1.0,
         help="prior scale; 0 always uses z = 0")
    _add(p, "--z", help="@file with d_z numbers; overrides prior sampling")
    _add(p, "--seed", type=int, default=0, help="prior sampling seed")
    _add(p, "--max-frames", type=_positive("--max-frames", int))
    _add(p, "--margin", type=float, default=0.5, help="termination margin in phonemes")
    _add(p, "--out", help="output sequence (VLSQ)")
    _add(p, "--csv", help="also export one channel as t,value CSV")
    _add(p, "--channel", type=_positive("--channel", int, allow_zero=True), default=0)

    p = command("interpolate", "encode two utterances and synthesize along the line between")
    _add(p, "--checkpoint", help="VLCK checkpoint")
    _add(p, "--a", help="first utterance as FILE[:INDEX] (VLD1 file, default index 0)")
    _add(p, "--b", help="second utterance as FILE[:INDEX]")
    _add(p, "--phonemes", type=_int_list, help="ids to synthesize, or @file")
    _add(p, "--alphas", type=_float_list, default="0,0.5,1", help="interpolation weights")
    _add(p, "--out-prefix", help="writes PREFIX_<alpha>.vlsq per weight")
    _add(p, "--channel", type=_positive("--channel", int, allow_zero=True), default=0,
         help="channel whose mean is printed")
    _add(p, "--margin", type=float, default=0.5)
    _add(p, "--max-frames", type=_positive("--max-frames", int))

    p = command("export-traj", "export one channel of a VLSQ sequence as t,value CSV")
    _add(p, "--seq", help="VLSQ sequence file")
    _add(p, "--channel", type=_positive("--channel", int, allow_zero=True), default=0)
    _add(p, "--out", help="CSV path (default: stdout)")
    return parser


def _merge_config(parser, args):
    """Fill unset flags from --config, then from defaults; collect model.* keys."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    model_kv = {}
    if args.config:
        try:
            kv = read_kv_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        for key, raw in kv.items():
            if key.startswith("model."):
                model_kv[key] = raw
                continue
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                raise UsageError(f"unknown key {key!r} in {args.config}")
            if getattr(args, dest) is not None:
                continue   # flag given on the command line wins
            action = actions[dest]
            try:
                value = action.type(raw) if action.type else raw
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"{args.config}: {exc}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
            setattr(args, dest, value)
    for dest in actions:
        if getattr(args, dest, None) is None:
            default = getattr(args, f"_default_{dest}", None)
            if isinstance(default, str) and actions[dest].type is not None:
                default = actions[dest].type(default)
            setattr(args, dest, default)
    args.model_kv = model_kv
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, []):
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")


def _model_config(args, mode, **dims):
    """ModelConfig from data dimensions, overridden by model.* config keys."""
    hints = ModelConfig.__dataclass_fields__
    kw = dict(dims)
    for key, raw in args.model_kv.items():
        name = key[len("model."):]
        if name not in hints or name == "mode":
            raise UsageError(f"unknown key {key!r} in {args.config}")
        kw[name] = convert(raw, hints[name].type, key)
    return ModelConfig(mode=mode, **kw)


def _load_checkpoint(path):
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from None


def _load_data(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise FormatError(f"cannot read dataset: {exc}") from None


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_gen_data(args):
    _require(args, "out")
    cfg = CorpusConfig(count=args.count, vocab_size=args.vocab_size, d_x=args.d_x,
                       noise=args.noise, seed=args.seed)
    corpus = generate_corpus(cfg)
    save_dataset(args.out, corpus)
    log.info("wrote %d utterances to %s", len(corpus), args.out)


def cmd_train(args):
    _require(args, "data", "out")
    corpus = _load_data(args.data)
    if len(corpus) <= 50:
        raise FormatError(f"dataset has {len(corpus)} utterances; training needs more than 50")
    train_set, val_set, _ = split(corpus, args.seed)
    if args.resume:
        resume = _load_checkpoint(args.resume)
        config = resume.config
    else:
        resume = None
        n_spk = args.n_speakers or (10 if args.mode == "baseline-labeled" else 1)
        mcfg = _model_config(args, args.mode, n_speakers=n_spk,
                             d_x=corpus[0].frames.shape[1],
                             vocab_size=int(max(u.phonemes.max() for u in corpus)) + 1)
        config = TrainConfig(learning_rate=args.lr, total_epochs=args.epochs,
                             anneal_fraction=args.anneal_frac, batch_size=args.batch_size,
                             seed=args.seed, stf_noise_scale=args.stf_noise, model=mcfg)
    trainer = Trainer(config, train_set, val_set, resume=resume)
    result = trainer.run(log_path=args.log or f"{args.out}.log.csv",
                         checkpoint_path=args.out, best_path=args.best or f"{args.out}.best")
    result.final.save(args.out)
    log.info("trained %d epochs, best validation total %.6g", result.final.epoch,
             result.final.best_val)


def cmd_eval(args):
    _require(args, "checkpoint", "data")
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_data(args.data)
    split_seed = ckpt.config.seed if args.split_seed is None else args.split_seed
    parts = dict(zip(("train", "validation", "test"), split(corpus, split_seed)))
    names = ["train", "validation", "test"] if args.split == "all" else [args.split]
    stf = ckpt.config.stf_noise_scale if args.stf_noise is None else args.stf_noise
    rows = [(ckpt.epoch - 1, evaluate(ckpt, parts[n], stf, seed=args.seed), n) for n in names]
    sys.stdout.write(format_log_rows(rows))


def cmd_encode(args):
    _require(args, "checkpoint", "data")
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_data(args.data)
    mu, sigma = ckpt.model.encode_utterances(corpus)
    d = mu.shape[1]
    out = _open_out(args.out)
    try:
        w = csv.writer(out)
        w.writerow(["index", "factor"] + [f"mu_{i}" for i in range(d)]
                   + [f"sigma_{i}" for i in range(d)])
        for i, u in enumerate(corpus):
            w.writerow([i, repr(float(u.factor))] + [repr(float(v)) for v in mu[i]]
                       + [repr(float(v)) for v in sigma[i]])
    finally:
        if out is not sys.stdout:
            out.close()


def _read_z(spec, d_z):
    path = spec[1:] if spec.startswith("@") else spec
    try:
        with open(path) as fh:
            values = _float_list(fh.read())
    except OSError as exc:
        raise FormatError(f"cannot read latent file: {exc}") from None
    except argparse.ArgumentTypeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if len(values) != d_z:
        raise FormatError(f"{path} holds {len(values)} numbers, model expects d_z={d_z}")
    return np.array(values)


def cmd_synthesize(args):
    _require(args, "checkpoint", "phonemes", "out")
    ckpt = _load_checkpoint(args.checkpoint)
    d_z = ckpt.config.model.d_z
    if args.z:
        z = _read_z(args.z, d_z)
    else:
        z = sample_prior(d_z, args.sigma, np.random.default_rng(args.seed))
    cfg = SynthesisConfig(sigma=args.sigma, max_frames=args.max_frames, seed=args.seed,
                          margin=args.margin)
    seq = synthesize(args.phonemes, z, cfg, ckpt)
    save_sequence(args.out, seq)
    if args.csv:
        trajectory_export(seq, args.channel, args.csv)
    log.info("wrote %d frames to %s", len(seq), args.out)


def _utterance(spec):
    path, _, index = spec.rpartition(":") if ":" in spec else (spec, "", "0")
    try:
        idx = int(index)
    except ValueError:
        raise UsageError(f"bad utterance reference {spec!r}; expected FILE[:INDEX]") from None
    corpus = _load_data(path)
    if not 0 <= idx < len(corpus):
        raise UsageError(f"{path} has {len(corpus)} utterances; index {idx} out of range")
    return corpus[idx]


def cmd_interpolate(args):
    _require(args, "checkpoint", "a", "b", "phonemes", "out_prefix")
    ckpt = _load_checkpoint(args.checkpoint)
    mu, _ = ckpt.model.encode_utterances([_utterance(args.a), _utterance(args.b)])
    cfg = SynthesisConfig(sigma=0.0, max_frames=args.max_frames, margin=args.margin)
    w = csv.writer(sys.stdout)
    w.writerow(["alpha", "frames", f"mean_channel_{args.channel}", "path"])
    for alpha in args.alphas:
        if not 0 <= alpha <= 1:
            raise UsageError(f"--alphas values must lie in [0, 1], got {alpha}")
        seq = synthesize(args.phonemes, interpolate_z(mu[0], mu[1], alpha), cfg, ckpt)
        path = f"{args.out_prefix}_{alpha:g}.vlsq"
        save_sequence(path, seq)
        w.writerow([f"{alpha:g}", len(seq), repr(float(seq[:, args.channel].mean())), path])


def cmd_export_traj(args):
    _require(args, "seq")
    try:
        seq = load_sequence(args.seq)
    except OSError as exc:
        raise FormatError(f"cannot read sequence: {exc}") from None
    if args.channel >= seq.shape[1]:
        raise UsageError(f"--channel {args.channel} out of range for d_x={seq.shape[1]}")
    rows = trajectory_export(seq, args.channel)
    out = _open_out(args.out)
    try:
        w = csv.writer(out)
        w.writerow(["t", "value"])
        for t, v in rows:
            w.writerow([t, repr(v)])
    finally:
        if out is not sys.stdout:
            out.close()


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "encode": cmd_encode,
    "synthesize": cmd_synthesize, "interpolate": cmd_interpolate,
    "export-traj": cmd_export_traj,
}


def run(argv=None):
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        args = _merge_config(parser, args)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                                format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (FormatError, InputTooShortError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (VaeLoopError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
