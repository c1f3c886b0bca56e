import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mvboost import gradengine as ge

from conftest import numeric_grad


def test_sum_grad_is_ones():
    x = ge.parameter(np.arange(5.0))
    ge.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_softmax_weighted_sum_matches_finite_differences():
    gen = np.random.default_rng(0)
    x = ge.parameter(gen.standard_normal((3, 7)))
    w = ge.parameter(gen.standard_normal((3, 7)))
    assert ge.grad_check(lambda: (x.softmax(axis=-1) * w).sum(), [x, w], h=1e-5) < 1e-4


def test_backward_twice_with_reset_is_identical():
    gen = np.random.default_rng(1)
    x = ge.parameter(gen.standard_normal((4, 4)))
    f = lambda: (x.tanh() @ x).gelu().sum()
    ge.backward(f())
    first = x.grad.copy()
    x.zero_grad()
    ge.backward(f())
    np.testing.assert_array_equal(first, x.grad)


def test_grads_accumulate_without_reset():
    x = ge.parameter(np.ones(3))
    ge.backward((x * 2.0).sum())
    ge.backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, np.full(3, 4.0))


def test_backward_requires_scalar():
    with pytest.raises(ge.ContractError):
        ge.backward(ge.parameter(np.ones(3)) * 2.0)


def test_linear_grad_check_is_essentially_exact():
    a = ge.parameter(np.random.default_rng(2).standard_normal(6))
    c = np.random.default_rng(3).standard_normal(6)
    assert ge.grad_check(lambda: (a * c).sum() + 3.0, [a]) < 1e-9


@pytest.mark.parametrize("name", ["exp", "tanh", "sigmoid", "softplus", "gelu", "sqrt", "log"])
def test_unary_ops(name):
    x = ge.parameter(np.random.default_rng(4).uniform(0.2, 2.0, (3, 4)))
    assert ge.grad_check(lambda: (getattr(x, name)() * x).sum(), [x]) < 1e-6


def test_composite_ops():
    gen = np.random.default_rng(5)
    a = ge.parameter(gen.standard_normal((2, 3, 4)))
    b = ge.parameter(gen.standard_normal((4, 5)))
    g = ge.parameter(gen.uniform(0.5, 1.5, 5))
    bias = ge.parameter(gen.standard_normal(5))

    def f():
        y = ge.layer_norm(a @ b, g, bias)
        z = ge.concat([y, y[:, :1] * 2.0], axis=1)
        z = ge.stack([z, z.swapaxes(1, 1)], axis=0).reshape(2, 2, -1)
        return (z[0, :, 3:9] / (z[1, :, :6] ** 2 + 1.0)).mean() + (a[[0, 1, 1]] ** 3).sum() - b.relu().sum()

    assert ge.grad_check(f, [a, b, g, bias]) < 1e-6


def test_custom_op():
    x = ge.parameter(np.array([0.3, -1.2, 2.0]))
    y = ge.custom_op([x], lambda v: np.sin(v), lambda g: [g * np.cos(x.data)], "sin")
    assert ge.grad_check(lambda: ge.custom_op([x], np.sin, lambda g: [g * np.cos(x.data)]).sum(), [x]) < 1e-8
    np.testing.assert_allclose(y.data, np.sin(x.data))


def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0])
    st_ = ge.AdamState(lr=0.1)
    ge.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step_closed_form():
    # first bias-corrected step is lr * g / (|g| + eps)
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    ge.adam_step([p], [g], ge.AdamState(lr=0.01))
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_minimizes_quadratic():
    x = np.array([1.0])
    st_ = ge.AdamState(lr=0.1)
    for _ in range(500):
        ge.adam_step([x], [2.0 * x], st_)
    assert abs(x[0]) < 1e-3


def test_adam_shape_contract():
    with pytest.raises(ge.ContractError):
        ge.adam_step([np.zeros(2)], [np.zeros(3)], ge.AdamState())


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_broadcast_binary_ops(xa, ya):
    x, y = ge.parameter(xa.copy()), ge.parameter(ya.copy())
    f = lambda: ((x + y) * (x - y) + x * 0.5 - (y * y + 1.0) / (x * x + 2.0)).sum()
    ge.backward(f())
    for p in (x, y):
        np.testing.assert_allclose(p.grad, numeric_grad(lambda: f().item(), p.data), rtol=1e-6, atol=1e-7)


def test_numpy_left_operand_defers_to_tensor():
    x = ge.parameter(np.ones((2, 2)))
    out = np.eye(2) @ x
    assert isinstance(out, ge.Tensor)
