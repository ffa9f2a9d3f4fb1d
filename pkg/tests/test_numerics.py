import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vaeloop.errors import (DimensionError, EmptySequenceError, InputTooShortError, RankError)
from vaeloop.numerics import (BatchNormState, Tape, Tensor, add, batch_norm, check_gradients,
                              clip, concat, conv1d, dropout, embedding, exp, getitem,
                              global_max_pool_time, kernels, linear, log, matmul, mean, mul,
                              no_grad, relu, reshape, sigmoid, softmax, softplus, square,
                              stack, sub, sum, tanh, tile_last, time_mask, transpose)


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def conv_loops(x, w, stride, padding):
    C_in, L = x.shape
    C_out, _, K = w.shape
    xp = np.zeros((C_in, L + 2 * padding))
    xp[:, padding:padding + L] = x
    L_out = (L + 2 * padding - K) // stride + 1
    y = np.zeros((C_out, L_out))
    for o in range(C_out):
        for t in range(L_out):
            acc = 0.0
            for c in range(C_in):
                for j in range(K):
                    acc += w[o, c, j] * xp[c, t * stride + j]
            y[o, t] = acc
    return y


def leaf(a):
    return Tensor(a, requires_grad=True)


# ---------------------------------------------------------------- tensors

def test_tensor_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.nan])
    with pytest.raises(FloatingPointError):
        Tensor([np.inf])


def test_tensor_is_float64_copy():
    src = np.arange(3, dtype=np.int32)
    t = Tensor(src)
    assert t.data.dtype == np.float64
    t.data[0] = 7
    assert src[0] == 0


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(RankError):
        tape.backward(y)


def test_unreached_leaf_gets_zero_gradient():
    a, b = leaf(np.ones(2)), leaf(np.ones(3))
    with Tape() as tape:
        loss = sum(square(a))
    g = tape.backward(loss, wrt=[a, b])
    np.testing.assert_array_equal(g[a], [2.0, 2.0])
    np.testing.assert_array_equal(g[b], np.zeros(3))


def test_reused_tensor_accumulates():
    x = leaf(np.array([3.0]))
    with Tape() as tape:
        loss = sum(add(mul(x, x), mul(x, 2.0)))
    assert tape.backward(loss)[x][0] == pytest.approx(8.0)


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with Tape() as tape:
        with no_grad():
            y = mul(x, 3.0)
    assert not tape.records and not y.requires_grad


# ---------------------------------------------------------------- matmul / linear

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_matches_triple_loop(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, k)), r.normal(size=(k, m))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b),
                               rtol=1e-12, atol=1e-12)


def test_linear_relu_forward(rng):
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    y = linear(Tensor(x), Tensor(w), Tensor(b), "relu").data
    np.testing.assert_allclose(y, np.maximum(matmul_loops(x, w) + b, 0.0), atol=1e-12)


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("act", [None, "relu"])
@pytest.mark.parametrize("bias_rows", [False, True])
def test_linear_gradients(rng, act, bias_rows):
    x = leaf(rng.normal(size=(4, 3)))
    w = leaf(rng.normal(size=(3, 5)))
    b = leaf(rng.normal(size=(4, 5) if bias_rows else (5,)))
    params = {"x": x, "w": w, "b": b}
    rep = check_gradients(lambda: sum(square(linear(x, w, b, act))), params)
    assert rep.ok, rep.failures


# ---------------------------------------------------------------- elementwise ops

ACTIVATIONS = [
    (tanh, math.tanh),
    (sigmoid, lambda v: 1.0 / (1.0 + math.exp(-v))),
    (softplus, lambda v: math.log1p(math.exp(v))),
    (exp, math.exp),
    (relu, lambda v: max(v, 0.0)),
    (square, lambda v: v * v),
]


@pytest.mark.parametrize("op,scalar", ACTIVATIONS)
def test_activation_values(op, scalar):
    xs = np.array([-3.0, -0.5, 0.25, 2.0])
    np.testing.assert_allclose(op(Tensor(xs)).data, [scalar(v) for v in xs], rtol=1e-13)


def test_softplus_and_sigmoid_are_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, 800.0]))
    np.testing.assert_allclose(softplus(x).data, [0.0, 800.0], atol=1e-300)
    np.testing.assert_allclose(sigmoid(x).data, [0.0, 1.0])


def test_softmax_rows_sum_to_one_with_large_logits():
    x = Tensor(np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]]))
    s = softmax(x, axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0)
    np.testing.assert_allclose(s[1], 1 / 3)


@pytest.mark.parametrize("op", [tanh, sigmoid, softplus, exp, square,
                                lambda t: log(add(square(t), 1.0)),
                                lambda t: softmax(t, axis=-1),
                                lambda t: clip(t, -0.5, 0.5)])
def test_elementwise_gradients(rng, op):
    x = leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    rep = check_gradients(lambda: sum(mul(op(x), w)), {"x": x})
    assert rep.ok, rep.failures


def test_shape_op_gradients(rng):
    a = leaf(rng.normal(size=(2, 3)))
    b = leaf(rng.normal(size=(2, 2)))
    w = rng.normal(size=(2, 5 * 2))

    def f():
        c = concat([a, b], axis=1)                     # [2, 5]
        t = tile_last(c, 2)                            # [2, 10]
        s = stack([t, mul(t, 2.0)], axis=0)            # [2, 2, 10]
        s = transpose(reshape(s, (4, 10)), (1, 0))     # [10, 4]
        g = getitem(s, slice(1, 9))
        return add(mean(g), sum(mul(t, w)))
    rep = check_gradients(f, {"a": a, "b": b})
    assert rep.ok, rep.failures


def test_broadcast_add_sub_unbroadcast(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(4,)))
    c = leaf(rng.normal(size=(3, 1)))
    rep = check_gradients(lambda: sum(square(sub(add(a, b), c))), {"a": a, "b": b, "c": c})
    assert rep.ok, rep.failures


# ---------------------------------------------------------------- conv / pooling

@pytest.mark.parametrize("stride,padding,K,L", [(1, 0, 3, 7), (2, 2, 5, 9), (2, 1, 3, 4),
                                                (3, 0, 2, 8)])
def test_conv1d_matches_nested_loops(backend, rng, stride, padding, K, L):
    x = rng.normal(size=(3, L))
    w = rng.normal(size=(4, 3, K))
    y = conv1d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    np.testing.assert_allclose(y, conv_loops(x, w, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv1d_batched_gradients(backend, rng):
    x = leaf(rng.normal(size=(2, 3, 9)))
    w = leaf(rng.normal(size=(4, 3, 5)))
    rep = check_gradients(lambda: sum(square(conv1d(x, w, stride=2, padding=2))),
                          {"x": x, "w": w})
    assert rep.ok, rep.failures


def test_conv1d_rejects_short_input():
    with pytest.raises(InputTooShortError):
        conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 5))))


def test_max_pool_matches_scan(backend, rng):
    x = rng.normal(size=(3, 4, 7))
    lengths = np.array([7, 3, 1])
    y = global_max_pool_time(Tensor(x), lengths).data
    for b in range(3):
        for c in range(4):
            best = -np.inf
            for t in range(lengths[b]):
                best = max(best, x[b, c, t])
            assert y[b, c] == best


def test_max_pool_tie_routes_to_first_index(backend):
    x = leaf(np.array([[1.0, 5.0, 5.0, 2.0]]))
    with Tape() as tape:
        loss = sum(global_max_pool_time(x))
    np.testing.assert_array_equal(tape.backward(loss)[x], [[0.0, 1.0, 0.0, 0.0]])


def test_max_pool_empty_sequence():
    with pytest.raises(EmptySequenceError):
        global_max_pool_time(Tensor(np.zeros((2, 0))))


def test_backends_agree_on_pool_gradient(rng):
    x = rng.normal(size=(2, 3, 6))
    out = []
    for name in kernels.available_backends():
        prev = kernels.set_backend(name)
        try:
            t = leaf(x)
            with Tape() as tape:
                loss = sum(square(global_max_pool_time(t, [6, 2])))
            out.append(tape.backward(loss)[t])
        finally:
            kernels.set_backend(prev)
    for g in out[1:]:
        np.testing.assert_array_equal(g, out[0])


# ---------------------------------------------------------------- batch norm, dropout, embedding

def test_batch_norm_uses_masked_statistics(rng):
    x = rng.normal(size=(2, 3, 5))
    lengths = [5, 2]
    mask = time_mask(lengths, 5)
    st_ = BatchNormState(3)
    y = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, mask, True).data
    valid = np.concatenate([x[0, :, :5], x[1, :, :2]], axis=1)     # [3, 7]
    mu, var = valid.mean(axis=1), valid.var(axis=1)
    expect0 = (x[0] - mu[:, None]) / np.sqrt(var[:, None] + 1e-5)
    np.testing.assert_allclose(y[0], expect0, atol=1e-12)
    np.testing.assert_array_equal(y[1, :, 2:], 0.0)
    np.testing.assert_allclose(st_.mean, 0.1 * mu, atol=1e-12)
    np.testing.assert_allclose(st_.var, 0.9 + 0.1 * valid.var(axis=1, ddof=1), atol=1e-12)


def test_batch_norm_gradients(rng):
    x = leaf(rng.normal(size=(2, 3, 5)))
    gamma, beta = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    mask = time_mask([5, 3], 5)
    w = rng.normal(size=(2, 3, 5))

    def f():
        return sum(mul(batch_norm(x, gamma, beta, BatchNormState(3), mask, True), w))
    rep = check_gradients(f, {"x": x, "gamma": gamma, "beta": beta})
    assert rep.ok, rep.failures


def test_batch_norm_eval_uses_running_stats():
    st_ = BatchNormState(1)
    st_.mean[:] = 2.0
    st_.var[:] = 4.0 - 1e-5
    x = Tensor(np.array([[[4.0, 0.0]]]))
    y = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), st_, time_mask([2], 2), False)
    np.testing.assert_allclose(y.data, [[[1.0, -1.0]]])


def test_dropout_is_identity_in_eval_and_unbiased_in_training():
    x = Tensor(np.ones(200_000))
    assert dropout(x, 0.3, None, training=False) is x
    y = dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}
    assert abs(y.mean() - 1.0) < 0.01


def test_embedding_backward_scatter_adds(rng):
    table = leaf(rng.normal(size=(4, 2)))
    ids = np.array([[1, 1, 3]])
    with Tape() as tape:
        loss = sum(embedding(table, ids))
    np.testing.assert_array_equal(tape.backward(loss)[table],
                                  [[0, 0], [2, 2], [0, 0], [1, 1]])
