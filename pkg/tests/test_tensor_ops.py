import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rfnet import tensor_ops as T
from rfnet.scalespace import kernel_2d

from .helpers import numeric_grad

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_correlate(x, k):
    h, w = x.shape
    r = k.shape[0] // 2
    xp = np.pad(x, r)
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(xp[i:i + 2 * r + 1, j:j + 2 * r + 1] * k)
    return out


# -- correlation --------------------------------------------------------

def test_delta_gives_flipped_kernel():
    k = np.arange(25, dtype=float).reshape(5, 5)
    x = np.zeros((11, 11))
    x[5, 5] = 1.0
    out = T.correlate2d(x, k)
    np.testing.assert_array_equal(out[3:8, 3:8], k[::-1, ::-1])


def test_identity_kernel_bitwise():
    x = np.random.default_rng(0).normal(size=(2, 7, 9))
    assert np.array_equal(T.correlate2d(x, np.ones((1, 1))), x)


def test_ones_kernel_on_constant():
    out = T.correlate2d(np.full((6, 6), 1.5), np.ones((3, 3)))
    np.testing.assert_allclose(out[1:-1, 1:-1], 13.5, atol=1e-12)
    assert out[0, 0] == pytest.approx(6.0)  # zero padding at the corner


def test_matches_naive_loop():
    rng = np.random.default_rng(1)
    x, k = rng.normal(size=(8, 10)), rng.normal(size=(5, 5))
    np.testing.assert_allclose(T.correlate2d(x, k), naive_correlate(x, k), atol=1e-12)


def test_convolve_is_flipped_correlation():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(9, 9)), rng.normal(size=(3, 3))
    np.testing.assert_allclose(T.convolve2d(x, k), naive_correlate(x, k[::-1, ::-1]), atol=1e-12)


def test_accepts_kernel2d():
    k = kernel_2d(1, 0, 1.0)
    x = np.random.default_rng(0).normal(size=(12, 12))
    np.testing.assert_array_equal(T.correlate2d(x, k), T.correlate2d(x, k.taps))


def test_kernel_too_large():
    with pytest.raises(ValueError):
        T.correlate2d(np.zeros((4, 4)), np.ones((9, 9)))
    with pytest.raises(ValueError):
        T.correlate2d(np.zeros((8, 8)), np.ones((2, 2)))


@given(a=finite, b=finite, seed=st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_correlation_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, k1, k2 = rng.normal(size=(2, 9, 9)), rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    lhs = T.correlate2d(x, a * k1 + b * k2)
    rhs = a * T.correlate2d(x, k1) + b * T.correlate2d(x, k2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, abs(a), abs(b)) * 10


def test_correlation_adjoint():
    # <corr(x, k), y> == <x, corr(y, flip(k))>
    rng = np.random.default_rng(5)
    x, y, k = rng.normal(size=(10, 10)), rng.normal(size=(10, 10)), rng.normal(size=(5, 5))
    lhs = np.sum(T.correlate2d(x, k) * y)
    rhs = np.sum(x * T.correlate2d(y, k[::-1, ::-1]))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_correlate1d_and_matrix():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 7, 11))
    taps = rng.normal(size=(2, 5))
    out = T.correlate1d(x, taps, axis=-1)
    assert out.shape == (3, 2, 7, 11)
    for p in range(2):
        np.testing.assert_allclose(out[:, p], x @ T.correlation_matrix(taps[p], 11), atol=1e-12)
        ref = T.correlate2d(x, np.pad(taps[p][None, :], ((2, 2), (0, 0))))
        np.testing.assert_allclose(out[:, p], ref, atol=1e-12)
    c = T.correlation_matrix(taps[0], 11)
    np.testing.assert_allclose(T.correlation_matrix(taps[0][::-1], 11), c.T, atol=0)


# -- pooling -------------------------------------------------------------

def test_maxpool_single_window():
    out, arg = T.maxpool2x2(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert out.tolist() == [[4.0]]
    assert arg.tolist() == [[3]]


def test_maxpool_constant():
    out, _ = T.maxpool2x2(np.full((3, 6, 8), 2.0))
    assert out.shape == (3, 3, 4)
    assert np.all(out == 2.0)


def test_maxpool_odd_sizes():
    x = np.arange(35, dtype=float).reshape(5, 7)
    out, arg = T.maxpool2x2(x)
    assert out.shape == (3, 4)
    assert out[2, 3] == x[4, 6]  # 1x1 corner window
    assert out[2, 0] == x[4, 1]  # 1x2 window in the last row
    np.testing.assert_array_equal(x.reshape(-1)[arg], out)


def test_maxpool_first_max_wins():
    _, arg = T.maxpool2x2(np.ones((2, 2)))
    assert arg[0, 0] == 0


def test_maxpool_too_small():
    with pytest.raises(ValueError):
        T.maxpool2x2(np.ones((1, 4)))


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[1.0, 5.0], [3.0, 4.0]])
    out, arg = T.maxpool2x2(x)
    g = T.maxpool2x2_backward(np.ones_like(out), arg, x.shape)
    np.testing.assert_array_equal(g, [[0, 1], [0, 0]])


@pytest.mark.parametrize("shape", [(2, 6, 6), (1, 5, 7)])
def test_maxpool_backward_fd(shape):
    rng = np.random.default_rng(0)
    x = rng.permutation(np.prod(shape)).reshape(shape).astype(float) * 0.1  # no ties
    w = rng.normal(size=T.maxpool2x2(x)[0].shape)
    out, arg = T.maxpool2x2(x)
    g = T.maxpool2x2_backward(w, arg, x.shape)
    num = numeric_grad(lambda z: float(np.sum(T.maxpool2x2(z)[0] * w)), x.copy())
    np.testing.assert_allclose(g, num, atol=1e-8)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 9), st.integers(2, 9)),
                  elements=finite))
def test_maxpool_properties(x):
    out, arg = T.maxpool2x2(x)
    ho, wo = -(-x.shape[1] // 2), -(-x.shape[2] // 2)
    assert out.shape == (x.shape[0], ho, wo)
    flat = x.reshape(x.shape[0], -1)
    np.testing.assert_array_equal(np.take_along_axis(flat, arg.reshape(x.shape[0], -1), 1),
                                  out.reshape(x.shape[0], -1))
    g = T.maxpool2x2_backward(np.ones_like(out), arg, x.shape)
    assert g.sum() == out.size


def test_unpool_local_matches_flat_backward():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    out, arg = T.maxpool2x2(x)
    _, local = T._pool_local(x)
    up = rng.normal(size=out.shape)
    np.testing.assert_array_equal(T.unpool_local(up, local, x.shape),
                                  T.maxpool2x2_backward(up, arg, x.shape))


# -- relu, average pooling, loss ------------------------------------------

def test_relu_examples():
    assert T.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert T.relu_backward(np.array([5.0, 5, 5]), np.array([-1.0, 0, 2])).tolist() == [0, 0, 5]


def test_relu_backward_fd():
    x = np.random.default_rng(0).normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    g = T.relu_backward(np.ones_like(x), x)
    num = numeric_grad(lambda z: float(np.sum(T.relu(z))), x.copy())
    np.testing.assert_allclose(g, num, atol=1e-6)


def test_global_avg_pool():
    assert T.global_avg_pool(np.full((1, 3, 3), 4.0)).tolist() == [4.0]
    assert T.global_avg_pool(np.array([[[0.0, 2.0], [4.0, 6.0]]])).tolist() == [3.0]


def test_global_avg_pool_backward_fd():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(3, 4, 5)), rng.normal(size=3)
    g = T.global_avg_pool_backward(w, x.shape)
    np.testing.assert_allclose(g, np.broadcast_to(w[:, None, None] / 20, x.shape))
    num = numeric_grad(lambda z: float(np.sum(T.global_avg_pool(z) * w)), x.copy())
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_softmax_uniform():
    loss, grad = T.softmax_xent(np.zeros(10), 3)
    assert loss == pytest.approx(math.log(10), abs=1e-9)
    assert grad[3] == pytest.approx(0.1 - 1)


@given(hnp.arrays(np.float64, st.integers(2, 12), elements=finite),
       st.floats(-100, 100), st.data())
def test_softmax_shift_and_sum(z, c, data):
    label = data.draw(st.integers(0, len(z) - 1))
    l1, g1 = T.softmax_xent(z, label)
    l2, g2 = T.softmax_xent(z + c, label)
    assert abs(l1 - l2) <= 1e-12 * max(1.0, abs(l1)) * 100
    np.testing.assert_allclose(g1, g2, atol=1e-12)
    assert abs(g1.sum()) <= 1e-12


def test_softmax_extreme_logits_finite():
    loss, grad = T.softmax_xent(np.array([1000.0, -1000.0, 0.0]), 1)
    assert np.isfinite(loss) and loss == pytest.approx(2000.0)
    assert np.all(np.isfinite(grad))


def test_softmax_grad_fd():
    z = np.random.default_rng(2).normal(size=6)
    _, g = T.softmax_xent(z, 4)
    num = numeric_grad(lambda v: T.softmax_xent(v, 4)[0], z.copy())
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_softmax_batch_and_errors():
    z = np.random.default_rng(3).normal(size=(4, 5))
    loss, grad = T.softmax_xent(z, [0, 1, 2, 3])
    for n in range(4):
        ln, gn = T.softmax_xent(z[n], n)
        assert loss[n] == pytest.approx(ln, abs=1e-15)
        np.testing.assert_allclose(grad[n], gn, atol=1e-15)
    with pytest.raises(ValueError):
        T.softmax_xent(np.zeros(3), 3)
    with pytest.raises(ValueError):
        T.softmax_xent(np.zeros(1), 0)


def test_im2col_matches_correlation():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 3, 6, 7)), rng.normal(size=(4, 3, 5, 5))
    out = (w.reshape(4, -1) @ T.im2col(x, 5)).reshape(2, 4, 6, 7)
    for n in range(2):
        for j in range(4):
            ref = sum(T.correlate2d(x[n, i], w[j, i]) for i in range(3))
            np.testing.assert_allclose(out[n, j], ref, atol=1e-12)
