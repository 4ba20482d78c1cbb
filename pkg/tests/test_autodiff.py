import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from read_pvla.autodiff import (
    Tensor,
    activation,
    backward,
    bce_with_logits,
    concat_cols,
    concat_rows,
    finite_diff_grad,
    inner,
    layer_norm,
    matmul,
    max_relative_error,
    mean_rows,
    mul,
    no_grad,
    reshape,
    rows,
    softmax_rows,
    sum_all,
    transpose,
)
from read_pvla.errors import ConfigError, DimensionError, NumericError


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def check_grad(f, *inputs, tol=1e-4):
    """Compare backward against central differences for every input of scalar ``f``."""
    for x in inputs:
        x.grad = None
    backward(f())
    for x in inputs:
        numeric = finite_diff_grad(lambda _x: f(), x)
        assert max_relative_error(x.grad, numeric) < tol


# matmul --------------------------------------------------------------------------


def test_matmul_identity():
    A = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(matmul(np.eye(2), A).data, A)


def test_matmul_scalar():
    assert matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_hand_example_against_triple_loop():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0], [6.0]]
    loop = [[sum(a[i][k] * b[k][j] for k in range(2)) for j in range(1)] for i in range(2)]
    assert matmul(a, b).data.tolist() == [[17.0], [39.0]] == loop


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# softmax ------------------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(softmax_rows([[1.0, 1.0]]).data, [[0.5, 0.5]], atol=1e-15)
    assert np.allclose(softmax_rows([[0.0, math.log(3.0)]]).data, [[0.25, 0.75]], atol=1e-15)
    e = math.e
    out = softmax_rows([[1000.0, 1001.0]]).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [[1 / (1 + e), e / (1 + e)]], atol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        softmax_rows([[0.0, np.nan]])


finite_rows = arrays(
    np.float64,
    st.tuples(st.integers(1, 5), st.integers(1, 6)),
    elements=st.floats(-50, 50, allow_nan=False),
)


@given(finite_rows, st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = softmax_rows(x).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(softmax_rows(x + c).data, y, atol=1e-12, rtol=0)


# layer norm ---------------------------------------------------------------------


def test_layer_norm_examples():
    assert np.allclose(layer_norm([[1.0, 3.0]], eps=0.0).data, [[-1.0, 1.0]], atol=1e-15)
    assert np.array_equal(layer_norm([[2.0, 2.0, 2.0]], eps=1e-5).data, np.zeros((1, 3)))


def test_layer_norm_statistics(rng):
    y = layer_norm(rng.normal(size=(3, 5)), eps=0.0).data
    assert np.abs(y.mean(axis=1)).max() < 1e-9
    assert np.abs(y.var(axis=1) - 1.0).max() < 1e-9


def test_layer_norm_zero_variance_without_eps_raises():
    with pytest.raises(NumericError):
        layer_norm([[4.0]], eps=0.0)


def test_layer_norm_negative_eps_rejected():
    with pytest.raises(ConfigError):
        layer_norm([[1.0, 2.0]], eps=-1.0)


@given(finite_rows.filter(lambda a: a.shape[1] >= 2))
@settings(max_examples=60, deadline=None)
def test_layer_norm_pre_affine_mean_is_zero(x):
    assert np.abs(layer_norm(x, eps=1e-5).data.mean(axis=1)).max() < 1e-9


# activations --------------------------------------------------------------------


def test_activation_examples():
    assert activation("gelu", [0.0]).data[0] == 0.0
    assert activation("tanh", [0.0]).data[0] == 0.0
    closed = 0.5 * 3 * (1 + math.tanh(math.sqrt(2 / math.pi) * (3 + 0.044715 * 27)))
    assert activation("gelu", [3.0]).data[0] == pytest.approx(closed, abs=1e-15)
    assert activation("gelu", [3.0]).data[0] == pytest.approx(2.9964, abs=1e-4)
    assert activation("relu", [-1.0, 2.0]).data.tolist() == [0.0, 2.0]
    assert activation("sigmoid", [0.0]).data[0] == 0.5


def test_unknown_activation():
    with pytest.raises(ConfigError):
        activation("swish", [1.0])


# backward -----------------------------------------------------------------------


def test_backward_product_rule():
    x, y = leaf(2.0), leaf(5.0)
    backward(mul(x, y))
    assert x.grad == 5.0 and y.grad == 2.0


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    backward(sum_all(mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_accumulates_on_repeat():
    x = leaf([1.0, -2.0])
    loss = sum_all(mul(x, x))
    backward(loss)
    backward(loss)
    assert x.grad.tolist() == [4.0, -8.0]


def test_backward_non_scalar_rejected():
    with pytest.raises(DimensionError):
        backward(mul(leaf([1.0, 2.0]), 2.0))


def test_shared_subexpression_visited_once():
    # y is used twice; each use must contribute exactly once
    x = leaf([3.0])
    y = mul(x, 2.0)
    backward(sum_all(mul(y, y)))
    assert x.grad.tolist() == [8.0 * 3.0]


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = sum_all(mul(x, x))
    assert not y.requires_grad
    backward(y)
    assert x.grad is None


# finite differences ---------------------------------------------------------------


def test_finite_diff_examples():
    x = leaf([3.0])
    assert finite_diff_grad(lambda t: (t.data**2).sum(), x)[0] == pytest.approx(6.0, abs=1e-6)
    w = np.array([2.0, -7.0, 0.5])
    for h in (1e-1, 1e-3, 1e-5):
        g = finite_diff_grad(lambda t: float(w @ t.data), leaf([0.3, 1.0, -4.0]), h)
        assert np.allclose(g, w, rtol=0, atol=1e-9)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda t: float("inf"), leaf([1.0]))


def test_finite_diff_restores_input():
    x = leaf([0.1, 0.2])
    before = x.data.copy()
    finite_diff_grad(lambda t: float((t.data**3).sum()), x)
    assert np.array_equal(x.data, before)


# gradient fidelity per primitive ---------------------------------------------------------


def test_grad_matmul_transpose(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(2, 3))
    check_grad(lambda: inner(transpose(matmul(a, b)), w), a, b)


def test_grad_softmax(rng):
    x = leaf(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    check_grad(lambda: inner(softmax_rows(x), w), x)


def test_grad_layer_norm(rng):
    x, g, b = leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    w = rng.normal(size=(4, 6))
    check_grad(lambda: inner(layer_norm(x, g, b, 1e-5), w), x, g, b)


@pytest.mark.parametrize("kind", ["gelu", "tanh", "sigmoid"])
def test_grad_activation(kind, rng):
    x = leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    check_grad(lambda: inner(activation(kind, x), w), x)


def test_grad_relu_away_from_kink():
    x = leaf([[-1.0, 0.5, 2.0]])
    check_grad(lambda: inner(activation("relu", x), np.array([[1.0, 2.0, 3.0]])), x)


def test_grad_slicing_and_concat(rng):
    x = leaf(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 6))

    def f():
        top, bottom = rows(x, 0, 2), rows(x, 2, 4)
        return inner(concat_cols([concat_rows([bottom, top]), x]), w)

    check_grad(f, x)


def test_grad_mean_rows_reshape(rng):
    x = leaf(rng.normal(size=(5, 2)))
    w = rng.normal(size=2)
    check_grad(lambda: inner(reshape(mean_rows(x), (2,)), w), x)


def test_grad_bce(rng):
    z = leaf(rng.normal(size=7))
    y = (rng.random(7) > 0.5).astype(float)
    check_grad(lambda: bce_with_logits(z, y), z)


def test_bce_matches_direct_formula(rng):
    z = rng.normal(size=9) * 3
    y = (rng.random(9) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    direct = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert bce_with_logits(z, y).item() == pytest.approx(direct, rel=1e-12)


def test_determinism_bitwise(rng):
    x = rng.normal(size=(4, 6))
    g = rng.normal(size=6)
    first = layer_norm(softmax_rows(x), g, None).data
    again = layer_norm(softmax_rows(x.copy()), g.copy(), None).data
    assert first.tobytes() == again.tobytes()
