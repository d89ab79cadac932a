"""Gradient and contract tests for the tensor engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from option_tracing import autodiff as ad
from option_tracing.errors import ShapeError


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def test_softmax_uniform_on_equal_logits():
    p = ad.softmax(ad.constant([[0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(p.values, [[0.25, 0.25, 0.25, 0.25]])


def test_analytic_point_values():
    assert ad.tanh(ad.constant(0.0)).values == 0.0
    assert ad.sigmoid(ad.constant(0.0)).values == 0.5


def test_concat_shape_rule():
    a = ad.constant(np.zeros(3))
    b = ad.constant(np.ones(3))
    assert ad.concat([a, b]).values.shape == (6,)


def test_concat_axis0_gradcheck():
    rng = np.random.default_rng(5)
    a = ad.parameter(rand(rng, 2, 3))
    b = ad.parameter(rand(rng, 4, 3))
    err = ad.finite_difference_check(
        lambda x, y: ad.sum_all(ad.tanh(ad.concat([x, y], axis=0))), [a, b])
    assert err < 1e-4


def test_softmax_rows_normalized():
    rng = np.random.default_rng(0)
    p = ad.softmax(ad.constant(rand(rng, 50, 4))).values
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_backward_linear_map():
    # loss = sum(w * x) so grad(w) = x
    rng = np.random.default_rng(1)
    w = ad.parameter(rand(rng, 4, 3))
    x = ad.constant(rand(rng, 4, 3))
    with ad.Graph() as g:
        loss = ad.sum_all(ad.multiply(w, x))
    grads = ad.backward(g, loss, wrt=[w])
    np.testing.assert_allclose(ad.grad_of(grads, w), x.values)


def test_backward_unused_leaf_gets_zero():
    w = ad.parameter(np.ones((2, 2)))
    unused = ad.parameter(np.ones(3))
    with ad.Graph() as g:
        loss = ad.sum_all(w)
    grads = ad.backward(g, loss, wrt=[w, unused])
    np.testing.assert_array_equal(ad.grad_of(grads, unused), np.zeros(3))


def test_gather_fanout_accumulates():
    table = ad.parameter(np.arange(6, dtype=float).reshape(3, 2))
    with ad.Graph() as g:
        a = ad.gather_rows(table, [1])
        b = ad.gather_rows(table, [1])
        loss = ad.sum_all(ad.add(a, b))
    grads = ad.backward(g, loss, wrt=[table])
    expected = np.zeros((3, 2))
    expected[1] = 2.0
    np.testing.assert_array_equal(ad.grad_of(grads, table), expected)


def test_backward_rejects_nonscalar_loss():
    w = ad.parameter(np.ones(3))
    with ad.Graph() as g:
        out = ad.scale(w, 2.0)
    with pytest.raises(ShapeError):
        ad.backward(g, out)


def test_disjoint_subgraphs_match_independent_backwards():
    rng = np.random.default_rng(2)
    a = ad.parameter(rand(rng, 3, 3))
    b = ad.parameter(rand(rng, 3, 3))

    with ad.Graph() as g:
        loss = ad.add(ad.sum_all(ad.tanh(a)), ad.sum_all(ad.sigmoid(b)))
    joint = ad.backward(g, loss, wrt=[a, b])

    with ad.Graph() as g1:
        la = ad.sum_all(ad.tanh(a))
    with ad.Graph() as g2:
        lb = ad.sum_all(ad.sigmoid(b))
    sep_a = ad.grad_of(ad.backward(g1, la, wrt=[a]), a)
    sep_b = ad.grad_of(ad.backward(g2, lb, wrt=[b]), b)

    np.testing.assert_allclose(ad.grad_of(joint, a), sep_a)
    np.testing.assert_allclose(ad.grad_of(joint, b), sep_b)


def test_constant_function_has_zero_gradient():
    x = ad.parameter(np.ones(4))
    err = ad.finite_difference_check(lambda t: ad.sum_all(ad.multiply(ad.constant(np.zeros(4)), t)), x)
    assert err == 0.0


def test_matmul_chain_gradcheck():
    rng = np.random.default_rng(3)
    a = ad.parameter(rand(rng, 3, 4))
    b = ad.parameter(rand(rng, 4, 5))
    c = ad.parameter(rand(rng, 5, 2))
    err = ad.finite_difference_check(lambda x, y, z: ad.sum_all(ad.matmul(ad.matmul(x, y), z)),
                                     [a, b, c])
    assert err < 1e-5


def test_softmax_nll_composite_gradcheck():
    rng = np.random.default_rng(4)
    z = ad.parameter(rand(rng, 6, 4))
    onehot = np.eye(4)[rng.integers(0, 4, size=6)]

    def nll(logits):
        picked = ad.row_sum(ad.multiply(ad.softmax(logits), ad.constant(onehot)))
        return ad.scale(ad.sum_all(ad.log(picked)), -1.0 / 6.0)

    assert ad.finite_difference_check(nll, z) < 1e-4


def _primitive_cases(rng):
    """One scalar-valued composite per primitive, inputs in [-2, 2]."""
    n, d = 4, 5
    weights = rand(rng, n, d)
    mask = rng.integers(0, 2, (n, d))
    return {
        "matmul": ([ad.parameter(rand(rng, n, d)), ad.parameter(rand(rng, d, 3))],
                   lambda a, b: ad.sum_all(ad.matmul(a, b))),
        "add": ([ad.parameter(rand(rng, n, d)), ad.parameter(rand(rng, d))],
                lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b)))),
        "multiply": ([ad.parameter(rand(rng, n, d)), ad.parameter(rand(rng, n, d))],
                     lambda a, b: ad.sum_all(ad.multiply(a, b))),
        "scale": ([ad.parameter(rand(rng, n, d))],
                  lambda a: ad.sum_all(ad.scale(a, -1.7))),
        "concat": ([ad.parameter(rand(rng, n, d)), ad.parameter(rand(rng, n, 2))],
                   lambda a, b: ad.sum_all(ad.tanh(ad.concat([a, b])))),
        "take_slice": ([ad.parameter(rand(rng, n, d))],
                       lambda a: ad.sum_all(ad.take_slice(a, (slice(1, 3), slice(0, 2))))),
        "transpose": ([ad.parameter(rand(rng, n, d))],
                      lambda a: ad.sum_all(ad.sigmoid(ad.matmul(ad.transpose(a), a)))),
        "tanh": ([ad.parameter(rand(rng, n, d))], lambda a: ad.sum_all(ad.tanh(a))),
        "sigmoid": ([ad.parameter(rand(rng, n, d))], lambda a: ad.sum_all(ad.sigmoid(a))),
        "exp": ([ad.parameter(rand(rng, n, d))], lambda a: ad.sum_all(ad.exp(a))),
        "log": ([ad.parameter(rng.uniform(0.1, 2.0, (n, d)))], lambda a: ad.sum_all(ad.log(a))),
        "gather_rows": ([ad.parameter(rand(rng, 6, d))],
                        lambda t: ad.sum_all(ad.tanh(ad.gather_rows(t, [0, 2, 2, 5])))),
        "row_sum": ([ad.parameter(rand(rng, n, d))],
                    lambda a: ad.sum_all(ad.tanh(ad.row_sum(a)))),
        "sum_all": ([ad.parameter(rand(rng, n, d))], lambda a: ad.tanh(ad.sum_all(a))),
        "softmax": ([ad.parameter(rand(rng, n, d))],
                    lambda a: ad.sum_all(ad.multiply(ad.softmax(a), ad.constant(weights)))),
        "masked_fill": ([ad.parameter(rand(rng, n, d))],
                        lambda a: ad.sum_all(ad.tanh(ad.masked_fill(a, mask, -3.0)))),
    }


@pytest.mark.parametrize("name", ad.PRIMITIVES)
def test_every_primitive_gradcheck(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(5):
        xs, f = _primitive_cases(rng)[name]
        assert ad.finite_difference_check(f, xs) < 1e-4, name


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_gradcheck_property(n, d, seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rand(rng, n, d))
    b = ad.parameter(rand(rng, d, 3))
    err = ad.finite_difference_check(lambda x, y: ad.sum_all(ad.sigmoid(ad.matmul(x, y))), [a, b])
    assert err < 1e-4
