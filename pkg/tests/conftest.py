import numpy as np
import pytest

from vaeloop.corpus import Utterance
from vaeloop.model import ModelConfig, Noise, VAELoop, make_batch
from vaeloop.numerics import kernels


def tiny_config(**kw):
    base = dict(vocab_size=5, d_x=3, d_buf=4, k=2, d_p=4, d_z=2, d_s=3, hidden=6,
                att_components=2, att_hidden=5, enc_channels=(3, 4), enc_hidden=5,
                dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=1, **kw):
    """Tiny model with every parameter nudged off its initial value."""
    cfg = tiny_config(**kw)
    m = VAELoop(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.params.values():
        p.data += rng.normal(0.0, 0.1, p.shape)
    return m


def tiny_batch(rng, lengths=(4, 6), d_x=3):
    utts = [Utterance(rng.integers(0, 5, 2 + i), rng.normal(size=(T, d_x)), 0.1 * i)
            for i, T in enumerate(lengths)]
    return make_batch(utts)


def tiny_noise(rng, batch, d_z=2, stf=0.1):
    return Noise(rng.standard_normal((batch.size, d_z)),
                 stf * rng.standard_normal(batch.frames.shape), None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
