"""Time the hot kernels and one training step under each available backend.

    python benchmarks/bench_kernels.py [--repeat 200] [--batch 16]

Shapes follow the default model on the synthetic corpus.
"""

import argparse
import timeit

import numpy as np

from vaeloop.corpus import CorpusConfig, generate_corpus
from vaeloop.model import FeatureNorm, ModelConfig, Noise, VAELoop, make_batch
from vaeloop.numerics import Tape
from vaeloop.numerics import kernels
from vaeloop.numerics.kernels import available_backends, set_backend


def kernel_cases(B, rng):
    K, L, d_p, T, C = 5, 30, 24, 160, 64
    raw = rng.normal(size=(B, 3 * K))
    kappa = np.abs(rng.normal(size=(B, K)))
    emb = rng.normal(size=(B, L, d_p))
    lengths = rng.integers(L // 2, L + 1, B)
    ctx, new_kappa, _, cache = kernels.impl.gmm_attention_forward(raw, kappa, emb, lengths)
    g_ctx, g_kappa = rng.normal(size=ctx.shape), rng.normal(size=new_kappa.shape)
    x = rng.normal(size=(B, C, T))
    pl = rng.integers(T // 2, T + 1, B)
    _, idx = kernels.impl.max_pool_forward(x, pl)
    g_pool = rng.normal(size=(B, C))
    return {
        "gmm_attention_forward": lambda: kernels.impl.gmm_attention_forward(raw, kappa, emb,
                                                                            lengths),
        "gmm_attention_backward": lambda: kernels.impl.gmm_attention_backward(g_ctx, g_kappa,
                                                                              cache, emb),
        "max_pool_forward": lambda: kernels.impl.max_pool_forward(x, pl),
        "max_pool_backward": lambda: kernels.impl.max_pool_backward(g_pool, idx, T),
    }


def training_step(B):
    utts = generate_corpus(CorpusConfig(count=B, seed=3))
    model = VAELoop(ModelConfig(), seed=0, norm=FeatureNorm.from_utterances(utts))
    batch = make_batch(utts, 1)

    def step():
        noise = Noise.draw(np.random.default_rng(0), batch, model.cfg, 0.1)
        with Tape() as tape:
            loss, _, _ = model.loss(batch, 1.0, noise, training=True)
        tape.backward(loss)
    return step


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per kernel timing")
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--steps", type=int, default=3, help="training steps timed per backend")
    args = ap.parse_args()

    backends = available_backends()
    results = {}
    for name in backends:
        set_backend(name)
        cases = kernel_cases(args.batch, np.random.default_rng(0))
        for kname, fn in cases.items():
            results[(kname, name)] = best_of(fn, 5, max(1, args.repeat // 5))
        results[("training_step", name)] = best_of(training_step(args.batch), args.steps, 1)

    names = list(dict.fromkeys(k for k, _ in results))
    header = f"{'kernel':26s}" + "".join(f"{b:>14s}" for b in backends)
    if "cython" in backends:
        header += f"{'speedup':>10s}"
    print(header)
    for kname in names:
        row = f"{kname:26s}" + "".join(f"{results[(kname, b)] * 1e6:12.1f}us" for b in backends)
        if "cython" in backends:
            row += f"{results[(kname, 'numpy')] / results[(kname, 'cython')]:9.2f}x"
        print(row)
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
