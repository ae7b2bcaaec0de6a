from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loracl import tensor as T
from loracl.tensor import ContractError, ShapeError, Tensor


def leaf(arr, name="x"):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------- construction


def test_tensor_rejects_nan_and_empty_dims():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.nan])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_tensor_data_is_read_only_copy():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_zero():
    x = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(np.eye(3), x).data, x)
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [0.0]])
    assert np.array_equal(out.data, [[0.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    assert T.grad_check(lambda x: T.matmul(x, b).sum(), a) < 1e-6
    assert T.grad_check(lambda x: T.matmul(a, x).sum(), b) < 1e-6
    w = rng.normal(size=(4, 3))
    assert T.grad_check(lambda x: (T.matmul(x, b) * w).sum(), a) < 1e-6


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(3, 5, 2))
    w = rng.normal(size=(2, 3, 4, 2))
    assert T.grad_check(lambda x: (T.matmul(x, b) * w).sum(), a) < 1e-6
    assert T.grad_check(lambda x: (T.matmul(a, x) * w).sum(), b) < 1e-6


def test_linear_uses_out_in_layout():
    rng = np.random.default_rng(2)
    x, w, bias = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    assert np.allclose(T.linear(x, w, bias).data, x @ w.T + bias, atol=1e-14)


# ---------------------------------------------------------------- softmax family


def test_softmax_examples():
    assert np.allclose(T.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])
    s = T.softmax(np.array([1000.0, 0.0])).data
    assert abs(s[0] - 1.0) < 1e-12 and s[1] < 1e-12
    rng = np.random.default_rng(3)
    w = rng.normal(size=7)
    assert T.grad_check(lambda x: (T.softmax(x) * w).sum(), rng.normal(size=7)) < 1e-6


def test_softmax_nan_raises():
    with pytest.raises(FloatingPointError):
        T.softmax(np.array([np.nan, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 500.0))
def test_softmax_rows_are_distributions(seed, scale):
    x = np.random.default_rng(seed).normal(size=(4, 6)) * scale
    s = T.softmax(x, axis=-1).data
    assert (s >= 0).all()
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_log_softmax_matches_reference():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    ref = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    assert np.allclose(T.log_softmax(x).data, ref, atol=1e-14)


# ---------------------------------------------------------------- layernorm / gelu


def test_layernorm_examples():
    out = T.layernorm(np.full((2, 4), 3.0), np.ones(4), np.zeros(4)).data
    assert np.array_equal(out, np.zeros((2, 4)))
    bias = np.array([1.0, 2.0, 3.0])
    out = T.layernorm(np.random.default_rng(0).normal(size=(5, 3)), np.zeros(3), bias).data
    assert np.array_equal(out, np.broadcast_to(bias, (5, 3)))


def test_layernorm_normalises_rows():
    x = np.random.default_rng(5).normal(size=(6, 16)) * 4 + 2
    y = T.layernorm(x, np.ones(16), np.zeros(16), eps=0.0).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-12)


def test_layernorm_gradients():
    rng = np.random.default_rng(6)
    x, g, b, w = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8), rng.normal(size=(3, 8))
    assert T.grad_check(lambda t: (T.layernorm(t, g, b) * w).sum(), x) < 1e-5
    assert T.grad_check(lambda t: (T.layernorm(x, t, b) * w).sum(), g) < 1e-5
    assert T.grad_check(lambda t: (T.layernorm(x, g, t) * w).sum(), b) < 1e-5


def test_layernorm_rejects_mismatched_gain():
    with pytest.raises(ShapeError):
        T.layernorm(np.ones((2, 4)), np.ones(3), np.zeros(4))


def test_gelu_examples():
    assert T.gelu(np.array([0.0])).data[0] == 0.0
    assert abs(T.gelu(np.array([10.0])).data[0] - 10.0) < 1e-6
    # closed form with the documented constant
    x = np.array([-1.3, 0.7])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(T.gelu(x).data, ref, atol=1e-15)
    assert T.grad_check(lambda t: T.gelu(t).sum(), np.array([-2.0, -0.5, 0.3, 4.0])) < 1e-6


# ---------------------------------------------------------------- losses


def test_cross_entropy_examples():
    assert abs(T.cross_entropy(np.zeros((3, 10)), [0, 4, 9]).item() - math.log(10)) < 1e-12
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 1e6
    assert abs(T.cross_entropy(logits, [1, 2]).item()) < 1e-9
    rng = np.random.default_rng(7)
    assert T.grad_check(lambda t: T.cross_entropy(t, [1, 3]), rng.normal(size=(2, 5))) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(np.zeros((2, 3)), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 6)) * 10
    assert T.cross_entropy(logits, rng.integers(0, 6, 5)).item() >= 0.0


def test_kl_div_examples():
    p = T.softmax(np.random.default_rng(8).normal(size=(3, 5)))
    assert T.kl_div(p, p).item() == 0.0
    assert abs(T.kl_div(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item() - math.log(2)) < 1e-12


def test_kl_div_gradient_wrt_q():
    rng = np.random.default_rng(9)
    p = T.softmax(rng.normal(size=(2, 4))).data
    z = rng.normal(size=(2, 4))
    assert T.grad_check(lambda t: T.kl_div(p, T.softmax(t)), z) < 1e-5


def test_kl_div_shape_mismatch():
    with pytest.raises(ShapeError):
        T.kl_div(np.ones((2, 3)) / 3, np.ones((3, 2)) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_div_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    p = T.softmax(rng.normal(size=(3, 6)))
    q = T.softmax(rng.normal(size=(3, 6)))
    assert T.kl_div(p, q).item() > 0.0
    assert T.kl_div(q, q).item() == 0.0


# ---------------------------------------------------------------- backward / tape


def test_backward_square():
    x = leaf([3.0])
    grads = T.backward(T.square(x).sum())
    assert grads == {"x": pytest.approx(np.array([6.0]))}
    assert x.grad[0] == 6.0


def test_frozen_weight_gets_no_gradient():
    w = Tensor(np.ones((2, 3)), name="W")
    x = leaf(np.arange(3.0).reshape(3, 1))
    grads = T.backward(T.matmul(w, x).sum())
    assert set(grads) == {"x"}


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(leaf(np.ones(3)) * 2.0)


def test_shared_node_accumulates():
    # y = x*x + x reuses x on three edges; dy/dx = 2x + 1
    x = leaf([1.5, -2.0])
    grads = T.backward((x * x + x).sum())
    assert np.allclose(grads["x"], [4.0, -3.0])


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad and T.backward(y) == {}


def test_grad_check_contracts():
    a = np.random.default_rng(10).normal(size=(3, 4))
    assert T.grad_check(lambda t: (t * 2.5).sum(), a) < 1e-10
    with pytest.raises(ContractError):
        T.grad_check(lambda t: t.sum(), a, eps=0.0)
    z = np.random.default_rng(11).normal(size=(2, 6))
    assert T.grad_check(lambda t: T.cross_entropy(T.log_softmax(t), [0, 5]), z) < 1e-6


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        return T._unary(x, x.data * x.data, lambda g: g * x.data, "bad").sum()

    assert T.grad_check(bad_square, np.array([1.0, 2.0])) > 0.4


# every differentiable op, on random inputs in [-2, 2]
def _op_cases(rng):
    a = rng.uniform(-2, 2, (3, 4))
    pos = rng.uniform(0.5, 2, (3, 4))
    w = rng.uniform(-2, 2, (3, 4))
    m = rng.uniform(-2, 2, (4, 2))
    g8, b8 = rng.uniform(-2, 2, 4), rng.uniform(-2, 2, 4)
    return {
        "add": (lambda t: ((t + w) * w).sum(), a),
        "sub": (lambda t: ((w - t) * w).sum(), a),
        "mul": (lambda t: (t * w).sum(), a),
        "div": (lambda t: (w / t).sum(), pos),
        "exp": (lambda t: (T.exp(t) * w).sum(), a),
        "log": (lambda t: (T.log(t) * w).sum(), pos),
        "sqrt": (lambda t: (T.sqrt(t) * w).sum(), pos),
        "tanh": (lambda t: (T.tanh(t) * w).sum(), a),
        "square": (lambda t: (T.square(t) * w).sum(), a),
        "mean": (lambda t: (t.mean(axis=1) * w[:, 0]).sum(), a),
        "reshape": (lambda t: (t.reshape(4, 3) * w.reshape(4, 3)).sum(), a),
        "transpose": (lambda t: (t.T * w.T).sum(), a),
        "getitem": (lambda t: (t[1:, ::2] * w[1:, ::2]).sum(), a),
        "broadcast": (lambda t: (T.broadcast_to(t[0], (3, 4)) * w).sum(), a),
        "concat": (lambda t: (T.concat([t, t * 2.0], axis=0) * T.concat([w, w], axis=0)).sum(), a),
        "matmul": (lambda t: (T.matmul(t, m) * w[:, :2]).sum(), a),
        "softmax": (lambda t: (T.softmax(t) * w).sum(), a),
        "log_softmax": (lambda t: (T.log_softmax(t) * w).sum(), a),
        "layernorm": (lambda t: (T.layernorm(t, g8, b8) * w).sum(), a),
        "gelu": (lambda t: (T.gelu(t) * w).sum(), a),
        "cross_entropy": (lambda t: T.cross_entropy(t, [0, 3, 1]), a),
        "kl_div": (lambda t: T.kl_div(T.softmax(w), T.softmax(t)), a),
    }


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (f, x) in _op_cases(rng).items():
        err = T.grad_check(f, x)
        assert err < 1e-4, f"{name}: {err}"


# ---------------------------------------------------------------- flop counter


def test_flop_counter_matmul_and_backward():
    a, b = leaf(np.ones((3, 4)), "a"), Tensor(np.ones((4, 5)))
    with T.count_flops() as c:
        y = T.matmul(a, b)
    assert c.forward == 2 * 3 * 4 * 5
    with T.count_flops() as c:
        T.backward(y.sum())
    # one input needs a gradient, so one matmul-sized backward, plus the sum
    assert c.backward == 2 * 3 * 4 * 5 + 15
