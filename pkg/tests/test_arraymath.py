import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tricond.arraymath import (ContractError, ParamStore, RngState, draw_int, draw_normal,
                               draw_uniform, finite_diff_check, gelu, gelu_bwd, layer_norm_bwd,
                               layer_norm_fwd, linear_bwd, matmul, permutation, softmax_rows)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        up = f()
        flat[i] = o - eps
        dn = f()
        flat[i] = o
        g.reshape(-1)[i] = (up - dn) / (2 * eps)
    return g


@given(st.integers(1, 6), st.integers(1, 9), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(rows, cols, shift):
    x = np.random.default_rng(rows * 10 + cols).normal(size=(rows, cols)) + shift
    p = softmax_rows(x)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.allclose(p, softmax_rows(x + 100.0))


def test_softmax_huge_negative_logits_vanish():
    p = softmax_rows(np.array([[0.0, -1e30, 1.0]]))
    assert p[0, 1] == 0.0


def test_matmul_shape_error():
    with pytest.raises(ContractError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_layer_norm_backward_matches_numeric():
    rng = np.random.default_rng(0)
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    y, cache = layer_norm_fwd(x, g, b)
    dx, dg, db = layer_norm_bwd(w, cache)
    f = lambda: float((layer_norm_fwd(x, g, b)[0] * w).sum())  # noqa: E731
    assert np.allclose(dx, numeric_grad(f, x), atol=1e-7)
    assert np.allclose(dg, numeric_grad(f, g), atol=1e-7)
    assert np.allclose(db, numeric_grad(f, b), atol=1e-7)


def test_layer_norm_normalises():
    x = np.random.default_rng(1).normal(3, 4, size=(6, 16))
    y, _ = layer_norm_fwd(x, np.ones(16), np.zeros(16))
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
    assert np.allclose(y.std(-1), 1, atol=1e-5)


def test_gelu_backward_matches_numeric():
    x = np.linspace(-4, 4, 41)
    w = np.cos(x)
    f = lambda: float((gelu(x) * w).sum())  # noqa: E731
    assert np.allclose(gelu_bwd(w, x), numeric_grad(f, x), atol=1e-8)


def test_gelu_float32_stays_float32():
    assert gelu(np.ones(3, np.float32)).dtype == np.float32


def test_linear_backward_matches_numeric():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    dy = rng.normal(size=(2, 3, 5))
    dx, dw, db = linear_bwd(dy, x, w)
    f = lambda: float(((x @ w) * dy).sum())  # noqa: E731
    assert np.allclose(dx, numeric_grad(f, x), atol=1e-7)
    assert np.allclose(dw, numeric_grad(f, w), atol=1e-7)
    assert np.allclose(db, dy.sum(axis=(0, 1)))


def test_rng_is_deterministic_and_counter_based():
    a, s1 = draw_uniform(RngState(5), 10)
    b, _ = draw_uniform(RngState(5), 10)
    assert np.array_equal(a, b)
    head, mid = draw_uniform(RngState(5), 4)
    tail, _ = draw_uniform(mid, 6)
    assert np.array_equal(np.concatenate([head, tail]), a)
    assert s1.counter == 10


def test_rng_split_streams_differ():
    a, _ = draw_uniform(RngState(5).split(1), 8)
    b, _ = draw_uniform(RngState(5).split(2), 8)
    assert not np.array_equal(a, b)


def test_normal_moments():
    z, _ = draw_normal(RngState(11), 200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


@given(st.integers(0, 2**31), st.integers(1, 50))
def test_draw_int_range(seed, high):
    v, _ = draw_int(RngState(seed), 64, high)
    assert v.min() >= 0 and v.max() < high


@given(st.integers(0, 2**31), st.integers(0, 40))
def test_permutation_is_permutation(seed, n):
    p, _ = permutation(RngState(seed), n)
    assert sorted(p.tolist()) == list(range(n))


def test_param_store_order_and_shape_guard():
    s = ParamStore({"b": np.zeros(2), "a": np.ones((2, 2))})
    assert s.names() == ["a", "b"]
    assert s.size() == 6
    with pytest.raises(ContractError):
        s["a"] = np.zeros(3)
    with pytest.raises(ContractError):
        s.add("a", np.zeros(1))


def test_finite_diff_check_on_quadratic():
    s = ParamStore({"w": np.array([1.0, -2.0, 3.0])})

    def loss(store):
        store.zero_grad()
        store.grads["w"] += 2 * store["w"]
        return float((store["w"] ** 2).sum())

    assert finite_diff_check(loss, s, eps=1e-3, samples=10) < 1e-10

    def wrong(store):
        store.zero_grad()
        store.grads["w"] += 3 * store["w"]
        return float((store["w"] ** 2).sum())

    assert finite_diff_check(wrong, s, eps=1e-3, samples=10) > 0.1
