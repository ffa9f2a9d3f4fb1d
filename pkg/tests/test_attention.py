import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vaeloop.attention import (AttentionState, attend, export_alignment_csv, gmm_attention,
                               has_terminated, mixture_weights_direct)
from vaeloop.errors import EmptySequenceError
from vaeloop.numerics import Tensor, check_gradients, kernels, mul, sum

from conftest import tiny_model


def _inputs(rng, B=3, K=3, L=6, D=4):
    raw = rng.normal(size=(B, 3 * K))
    raw[:, K:2 * K] += 1.0     # widths around e, so no density underflows in the oracle
    kappa = np.abs(rng.normal(size=(B, K)))
    emb = rng.normal(size=(B, L, D))
    return raw, kappa, emb


def test_weights_match_direct_evaluation(backend, rng):
    raw, kappa, emb = _inputs(rng)
    lengths = np.array([6, 4, 1])
    ctx, kappa_new, w = gmm_attention(Tensor(raw), Tensor(kappa), Tensor(emb), lengths)
    for b in range(3):
        ref_w, ref_kappa = mixture_weights_direct(raw[b], kappa[b], lengths[b])
        np.testing.assert_allclose(w[b, :lengths[b]], ref_w, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(w[b, lengths[b]:], 0.0)
        np.testing.assert_allclose(kappa_new.data[b], ref_kappa, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(ctx.data[b], np.asarray(ref_w) @ emb[b, :lengths[b]],
                                   rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-30.0, 30.0))
def test_kappa_never_decreases_and_weights_are_convex(seed, shift):
    r = np.random.default_rng(seed)
    raw, kappa, emb = _inputs(r, B=2)
    raw[:, 6:] += shift            # increment pre-activations anywhere from -30 to 30
    _, kappa_new, w = gmm_attention(Tensor(raw), Tensor(kappa), Tensor(emb), [6, 3])
    assert (kappa_new.data >= kappa).all()
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_very_negative_increment_keeps_location():
    raw = np.zeros((1, 3))
    raw[0, 2] = -50.0
    _, kappa, _ = gmm_attention(Tensor(raw), Tensor(np.array([[2.0]])),
                                Tensor(np.ones((1, 4, 2))), [4])
    assert kappa.data[0, 0] == pytest.approx(2.0, abs=1e-20)


def test_narrow_component_focuses_on_nearest_phoneme():
    K = 1
    raw = np.array([[0.0, np.log(0.05), np.log(np.expm1(2.0))]])
    _, _, w = gmm_attention(Tensor(raw), Tensor(np.zeros((1, K))),
                            Tensor(np.eye(5)[None]), [5])
    assert w[0].argmax() == 2 and w[0, 2] > 1 - 1e-12


def test_extreme_widths_are_clipped_not_nan():
    raw = np.array([[0.0, -1e4, 0.0], [0.0, 1e4, 0.0]])
    _, _, w = gmm_attention(Tensor(raw), Tensor(np.zeros((2, 1))),
                            Tensor(np.ones((2, 3, 2))), [3, 3])
    assert np.isfinite(w).all()
    np.testing.assert_allclose(w[1], 1 / 3, atol=1e-6)     # huge width: uniform


def test_attention_gradients(backend, rng):
    raw, kappa, emb = _inputs(rng, B=2, K=2, L=5, D=3)
    raw_t, kappa_t, emb_t = (Tensor(a, requires_grad=True) for a in (raw, kappa, emb))
    g_ctx, g_kappa = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))

    def f():
        ctx, k, _ = gmm_attention(raw_t, kappa_t, emb_t, [5, 3])
        return sum(mul(ctx, g_ctx)) + sum(mul(k, g_kappa))
    rep = check_gradients(f, {"raw": raw_t, "kappa": kappa_t, "emb": emb_t})
    assert rep.ok, rep.failures


def test_backends_agree(rng):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    raw, kappa, emb = _inputs(rng, B=4, K=5, L=9, D=6)
    lengths = np.array([9, 5, 2, 7])
    outs = {}
    for name in kernels.available_backends():
        impl = kernels.get_backend(name)
        ctx, k, w, cache = impl.gmm_attention_forward(raw, kappa, emb, lengths)
        grads = impl.gmm_attention_backward(np.ones_like(ctx), np.ones_like(k), cache, emb)
        outs[name] = (ctx, k, w) + tuple(grads)
    for a, b in zip(outs["numpy"], outs["cython"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_empty_sequence_rejected():
    with pytest.raises(EmptySequenceError):
        gmm_attention(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 1))),
                      Tensor(np.zeros((1, 0, 2))), [0])


def test_termination_examples():
    assert not has_terminated(np.array([[0.0, 0.0]]), 3, 0.5)
    assert has_terminated(np.array([[2.5, 2.5]]), 3, 0.5)
    assert not has_terminated(np.array([[2.0, 2.9]]), 3, 0.5)      # mean 2.45
    assert has_terminated(np.array([[0.0]]), 1, 0.0)


def test_attend_single_sequence_matches_batch(rng):
    m = tiny_model()
    cfg = m.cfg
    enc = rng.normal(size=(3, cfg.d_p))
    q = rng.normal(size=cfg.k * cfg.d_buf)
    st1 = AttentionState(Tensor(np.full((1, cfg.att_components), 0.3)))
    ctx1, s1 = attend(st1, enc, q, m.params)
    ctxb, sb = attend(st1, enc[None], q[None], m.params)
    np.testing.assert_array_equal(ctx1.data, ctxb.data[0])
    np.testing.assert_array_equal(s1.kappa.data, sb.kappa.data)
    assert len(s1.history) == 1


def test_stationary_when_increment_vanishes(rng):
    raw = np.zeros((1, 6))
    raw[0, 4:] = -40.0
    kappa = np.array([[1.0, 1.0]])
    emb = rng.normal(size=(1, 4, 2))
    ctx1, k1, w1 = gmm_attention(Tensor(raw), Tensor(kappa), Tensor(emb), [4])
    ctx2, k2, w2 = gmm_attention(Tensor(raw), k1, Tensor(emb), [4])
    np.testing.assert_allclose(w1, w2, atol=1e-15)


def test_alignment_export(tmp_path):
    weights = [np.array([0.75, 0.25]), np.array([0.125, 0.875])]
    path = tmp_path / "align.csv"
    export_alignment_csv(path, weights)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 4
    assert float(rows[3]["weight"]) == 0.875 and rows[3]["phoneme_index"] == "1"
