import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facediff import autograd as ag
from facediff.gradcheck import GradCheckError, grad_check, relative_error


def rand(rng, *shape):
    return ag.Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_ops_with_broadcasting(op):
    rng = np.random.default_rng(0)
    a, b = rand(rng, 2, 3, 4), rand(rng, 3, 1)
    if op == "div":
        b.data = np.abs(b.data) + 1.0
    fn = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b}[op]
    assert grad_check(fn, [a, b]) < 1e-6


@pytest.mark.parametrize("shapes", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5)),
                                    ((2, 2, 3, 4), (2, 2, 4, 3))])
def test_matmul(shapes):
    rng = np.random.default_rng(1)
    a, b = rand(rng, *shapes[0]), rand(rng, *shapes[1])
    assert grad_check(lambda: ag.matmul(a, b), [a, b]) < 1e-6


def test_matmul_flattened_path_matches_numpy():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 5, 4)), rng.normal(size=(4, 6))
    np.testing.assert_allclose(ag.matmul(a, b).data, a @ b, rtol=1e-12)


@pytest.mark.parametrize("name", ["exp", "tanh", "silu", "gelu", "square", "layer_norm"])
def test_unary_ops(name):
    rng = np.random.default_rng(3)
    x = rand(rng, 3, 5)
    fn = getattr(ag, name)
    assert grad_check(lambda: fn(x), [x]) < 1e-6


def test_softmax_rows_sum_to_one_and_gradients():
    rng = np.random.default_rng(4)
    x = rand(rng, 4, 6)
    np.testing.assert_allclose(ag.softmax(x).data.sum(-1), 1.0)
    assert grad_check(lambda: ag.softmax(x), [x]) < 1e-6
    assert grad_check(lambda: ag.log_softmax(x), [x]) < 1e-6


def test_softmax_survives_mask_sentinel():
    x = np.array([[0.0, -1e9, 3.0]])
    out = ag.softmax(x).data
    assert np.all(np.isfinite(out)) and out[0, 1] == 0.0


def test_layer_norm_statistics():
    x = np.random.default_rng(5).normal(3.0, 2.0, size=(7, 16))
    y = ag.layer_norm(x).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-6)


def test_indexing_reshape_transpose_concat():
    rng = np.random.default_rng(6)
    x, y = rand(rng, 2, 3, 4), rand(rng, 2, 3, 2)
    assert grad_check(lambda: x[:, 1:, ::2], [x]) < 1e-6
    assert grad_check(lambda: x[np.array([0, 0, 1]), np.array([1, 2, 2])], [x]) < 1e-6
    assert grad_check(lambda: x.reshape(6, 4).transpose(1, 0), [x]) < 1e-6
    assert grad_check(lambda: ag.concat([x, y], axis=-1), [x, y]) < 1e-6
    assert grad_check(lambda: x.sum(axis=1) + x.mean(axis=(0, 2), keepdims=True).sum(), [x]) < 1e-6


def test_take_rows_accumulates_repeated_rows():
    table = ag.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ag.take_rows(table, np.array([0, 2, 0])).sum().backward()
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_broadcast_to_gradient_sums():
    x = ag.Tensor(np.ones((1, 1, 3)), requires_grad=True)
    ag.broadcast_to(x, (2, 4, 3)).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 3), 8.0))


def test_shared_subexpression_gradients_accumulate():
    x = ag.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == 5.0


def test_no_grad_builds_no_graph():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()
    assert ag.is_grad_enabled()


def test_float32_policy_keeps_float32():
    rng = np.random.default_rng(7)
    with ag.dtype_scope(np.float32):
        x = ag.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        y = ag.gelu(ag.layer_norm(x)) * 0.5
        y.sum().backward()
        assert x.data.dtype == np.float32 and y.data.dtype == np.float32 and x.grad.dtype == np.float32
    assert ag.get_dtype() == np.float64


def test_grad_check_rejects_float32_and_catches_wrong_gradient():
    with ag.dtype_scope(np.float32):
        x = ag.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradCheckError):
        grad_check(lambda: x * 2.0, [x])

    y = ag.Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def wrong():  # forward x**2, backward claims x
        return ag._make(y.data ** 2, (y,), lambda g: (g * y.data,))

    assert grad_check(wrong, [y]) > 0.1


def test_relative_error_floor():
    assert relative_error(np.array(0.0), np.array(0.0)) == 0.0
    assert relative_error(np.array(1.0), np.array(1.1)) == pytest.approx(0.1 / 1.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_unbroadcast_inverts_broadcasting(shape, data):
    # drop leading dims and collapse random axes to 1; summing back must match
    k = data.draw(st.integers(0, len(shape) - 1))
    small = [1 if data.draw(st.booleans()) else s for s in shape[k:]]
    g = np.random.default_rng(0).normal(size=shape)
    out = ag.unbroadcast(g, tuple(small))
    assert out.shape == tuple(small)
    np.testing.assert_allclose(out.sum(), g.sum())
