import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngramformer.tensor import (
    ComputationTape,
    ShapeError,
    Tensor,
    concat_last_dim,
    grad_check,
    layer_norm,
    masked_max_pool,
    matmul,
    mul,
    no_grad,
    relu,
    shift,
    softmax_last_dim,
    tsum,
)


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for r in range(k):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc
    return out


def t(x, grad=True):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    b = np.array([[1.5, -2.0], [3.0, 4.25]])
    np.testing.assert_array_equal(matmul(t(np.eye(2)), t(b)).data, b)


def test_matmul_small_analytic():
    assert matmul(t([[1, 2]]), t([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_loop_oracle_seed7():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(matmul(t(a), t(b)).data, loop_matmul(a, b), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matmul_loop_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(matmul(t(a), t(b)).data, loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))


def test_matmul_batched_broadcast_gradients():
    rng = np.random.default_rng(0)
    a, b = t(rng.normal(size=(2, 3, 4))), t(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))
    assert grad_check(lambda: tsum(mul(matmul(a, b), w)), [a, b]) < 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_last_dim(t([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax_last_dim(t([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_shift_invariance():
    x = np.random.default_rng(1).normal(size=(3, 6))
    a = softmax_last_dim(t(x)).data
    b = softmax_last_dim(t(x + 123.4)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_masked_entries_exactly_zero():
    x = np.random.default_rng(2).normal(size=(2, 4))
    visible = np.array([[True, False, True, False], [False, False, False, True]])
    y = softmax_last_dim(t(x), visible).data
    assert (y[~visible] == 0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert y[1, 3] == 1.0


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError, match="fully masked"):
        softmax_last_dim(t(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=10, size=(rows, cols))
    visible = rng.random((rows, cols)) < 0.6
    visible[:, 0] = True
    y = softmax_last_dim(t(x), visible).data
    assert (y >= 0).all()
    assert np.abs(y.sum(-1) - 1).max() < 1e-9
    assert (y[~visible] == 0).all()


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    x = t(rng.normal(size=(3, 5)))
    visible = rng.random((3, 5)) < 0.7
    visible[:, 2] = True
    w = rng.normal(size=(3, 5))
    assert grad_check(lambda: tsum(mul(softmax_last_dim(x, visible), w)), [x]) < 1e-6


# ---------------------------------------------------------------- relu


def test_relu_definition():
    assert relu(t([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_dead_region():
    x = t(-np.arange(1, 5, dtype=float))
    y = relu(x)
    tsum(y).backward()
    assert (y.data == 0).all() and (x.grad == 0).all()


def test_relu_subgradient():
    x = t([-1.0, 3.0])
    tsum(relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_relu_gradient_at_zero_is_zero():
    x = t([0.0])
    tsum(relu(x)).backward()
    assert x.grad.tolist() == [0.0]


def test_relu_gradient_away_from_kinks():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    xt = t(x)
    w = rng.normal(size=(4, 5))
    assert grad_check(lambda: tsum(mul(relu(xt), w)), [xt]) < 1e-6


# ---------------------------------------------------------------- concat


def test_concat_single_part_is_identity():
    a = t(np.ones((2, 3)))
    assert concat_last_dim([a]) is a


def test_concat_shape():
    assert concat_last_dim([t(np.zeros((2, 3))), t(np.zeros((2, 5)))]).shape == (2, 8)


def test_concat_leading_shape_mismatch():
    with pytest.raises(ShapeError):
        concat_last_dim([t(np.zeros((2, 3))), t(np.zeros((3, 3)))])


def test_concat_gradient_split_matches_finite_differences():
    rng = np.random.default_rng(5)
    parts = [t(rng.normal(size=(2, k))) for k in (1, 3, 2)]
    w = rng.normal(size=(2, 6))
    assert grad_check(lambda: tsum(mul(concat_last_dim(parts), w)), parts) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_concat_then_split_is_identity(widths, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(3, w)) for w in widths]
    joined = concat_last_dim([t(p) for p in parts]).data
    pieces = np.split(joined, np.cumsum(widths)[:-1], axis=-1)
    for p, q in zip(parts, pieces):
        np.testing.assert_array_equal(p, q)


# ---------------------------------------------------------------- shift


def test_shift_zero_fills():
    x = t(np.arange(1.0, 5.0).reshape(1, 4, 1))
    assert shift(x, -1).data.ravel().tolist() == [0, 1, 2, 3]
    assert shift(x, 2).data.ravel().tolist() == [3, 4, 0, 0]
    assert shift(x, 7).data.ravel().tolist() == [0, 0, 0, 0]


def test_shift_gradient():
    rng = np.random.default_rng(6)
    x = t(rng.normal(size=(2, 5, 3)))
    w = rng.normal(size=(2, 5, 3))
    for o in (-2, 0, 1, 4):
        assert grad_check(lambda: tsum(mul(shift(x, o), w)), [x]) < 1e-8


# ---------------------------------------------------------------- max pool


def test_max_pool_singleton():
    x = np.array([[[1.5, -2.0, 3.0]]])
    np.testing.assert_array_equal(masked_max_pool(t(x)).data, x[:, 0])


def test_max_pool_per_feature():
    assert masked_max_pool(t([[[1, 5], [3, 2]]])).data.tolist() == [[3.0, 5.0]]


def test_max_pool_permutation_invariance():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 6, 4))
    pad = np.array([[False, False, False, False, True, True]])
    perm = np.r_[rng.permutation(4), 4, 5]
    a = masked_max_pool(t(x), pad).data
    b = masked_max_pool(t(x[:, perm]), pad).data
    np.testing.assert_array_equal(a, b)


def test_max_pool_ignores_padding_and_empty_row_is_zero():
    x = np.array([[[1.0], [9.0]], [[4.0], [5.0]]])
    pad = np.array([[False, True], [True, True]])
    assert masked_max_pool(t(x), pad).data.tolist() == [[1.0], [0.0]]


def test_max_pool_gradient_first_argmax_on_ties():
    x = t([[[2.0, 1.0], [2.0, 3.0], [0.0, 3.0]]])
    tsum(masked_max_pool(x)).backward()
    assert x.grad[0].tolist() == [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]


def test_max_pool_gradient():
    rng = np.random.default_rng(9)
    x = t(rng.normal(size=(2, 5, 3)))
    pad = np.zeros((2, 5), dtype=bool)
    pad[1, 3:] = True
    w = rng.normal(size=(2, 3))
    assert grad_check(lambda: tsum(mul(masked_max_pool(x, pad), w)), [x]) < 1e-8


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_slice_is_zero():
    y = layer_norm(t(np.full((2, 5), 3.7)), t(np.ones(5)), t(np.zeros(5)), 1e-5)
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_layer_norm_statistics():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 16)) * 5 + 2
    gain, bias = 1.7, rng.normal(size=16)
    y = layer_norm(t(x), t(np.full(16, gain)), t(np.zeros(16)), 1e-5).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.std(-1), gain, atol=1e-6)
    yb = layer_norm(t(x), t(np.ones(16)), t(bias), 1e-5).data
    np.testing.assert_allclose(yb.mean(-1), bias.mean(), atol=1e-6)


def test_layer_norm_gradient():
    rng = np.random.default_rng(11)
    x, g, b = t(rng.normal(size=(3, 6))), t(rng.normal(size=6)), t(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    assert grad_check(lambda: tsum(mul(layer_norm(x, g, b, 1e-5), w)), [x, g, b]) < 1e-6


# ---------------------------------------------------------------- grad_check and the tape


def test_grad_check_linear():
    x = t(np.random.default_rng(12).normal(size=(3, 4)))
    assert grad_check(lambda: tsum(x), [x]) < 1e-10


def test_grad_check_constant():
    x = t(np.ones(3))
    assert grad_check(lambda: Tensor(5.0), [x]) == 0.0
    assert x.grad is None


def test_grad_check_rejects_non_finite():
    x = t(np.ones(2))
    with pytest.raises(FloatingPointError):
        grad_check(lambda: tsum(mul(x, np.inf)), [x])


def test_grad_check_detects_wrong_backward():
    from ngramformer import tensor as T

    x = t([0.5, 1.5])

    def broken(a):
        return T._make(a.data * 2, (a,), lambda g: (g,))

    assert grad_check(lambda: tsum(broken(x)), [x]) > 0.1


def test_gradient_accumulates_over_two_paths():
    rng = np.random.default_rng(13)
    x = t(rng.normal(size=(3,)))
    w = rng.normal(size=3)
    f = lambda: tsum(mul(mul(x, x), w)) + tsum(mul(x, 2.0))
    assert grad_check(f, [x]) < 1e-8
    np.testing.assert_allclose(x.grad, 2 * x.data * w + 2.0, atol=1e-12)


def test_tape_visits_every_node_once():
    a, b = t([1.0, 2.0]), t([3.0, 4.0])
    c = mul(a, b)
    d = c + c
    e = tsum(mul(d, a))
    tape = ComputationTape(e)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids)) == 6
    assert tape.nodes[-1] is e
    for pos, node in enumerate(tape.nodes):
        for parent in node._parents:
            if parent.requires_grad:
                assert ids.index(id(parent)) < pos


def test_leaf_gradients_accumulate_across_backward_calls():
    x = t([1.0, -2.0])
    tsum(mul(x, 3.0)).backward()
    tsum(mul(x, 3.0)).backward()
    assert x.grad.tolist() == [6.0, 6.0]


def test_no_grad_records_nothing():
    x = t([1.0])
    with no_grad():
        y = mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_forward_values_stay_finite():
    rng = np.random.default_rng(14)
    x = t(rng.normal(scale=50, size=(2, 7)))
    for y in (softmax_last_dim(x), layer_norm(x, t(np.ones(7)), t(np.zeros(7)), 1e-5), relu(x)):
        assert np.isfinite(y.data).all()
