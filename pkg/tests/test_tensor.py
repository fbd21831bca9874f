import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbd_scene import tensor as T


def test_conv_shape_stride2():
    x = np.zeros((3, 35, 35))
    w = np.zeros((64, 3, 5, 5))
    assert T.conv2d_forward(x, w, np.zeros(64), stride=2).shape == (64, 16, 16)


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -1.0, 2.0])
    out = T.conv2d_forward(np.zeros((2, 6, 6)), np.random.rand(3, 2, 3, 3), b)
    assert np.all(out == b[:, None, None])


def test_conv_sum_of_ones():
    out = T.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d_forward(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("dy,dx", [(0, 0), (0, 2), (1, 1), (2, 0)])
def test_conv_one_hot_kernel_is_shift(dy, dx):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 7, 8))
    w = np.zeros((1, 2, 3, 3))
    w[0, 1, dy, dx] = 1
    out = T.conv2d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(out[0], x[1, dy:dy + 5, dx:dx + 6])


def test_conv_batch_matches_single():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2, 9, 9))
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    batch = T.conv2d_forward(x, w, b, 2, 1)
    for i in range(4):
        np.testing.assert_allclose(batch[i], T.conv2d_forward(x[i], w, b, 2, 1), rtol=1e-12)


def test_maxpool_examples():
    assert T.maxpool_forward(np.zeros((64, 58, 58)), 2, 2).shape == (64, 29, 29)
    out = T.maxpool_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    np.testing.assert_array_equal(out, [[[4.0]]])
    const = np.full((2, 6, 6), 1.5)
    np.testing.assert_array_equal(T.maxpool_forward(const, 3, 1), 1.5)


def test_maxpool_window_too_large():
    with pytest.raises(T.ShapeError):
        T.maxpool_forward(np.zeros((1, 2, 2)), 3, 1)


def test_maxpool_tie_routes_to_first():
    x = np.ones((1, 2, 2))
    g = T.maxpool_backward(np.array([[[1.0]]]), x, 2, 2)
    np.testing.assert_array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])


def test_relu_examples():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not T.relu(-np.arange(1, 5.0)).any()
    x = np.random.default_rng(1).normal(size=20)
    np.testing.assert_array_equal(T.relu(T.relu(x)), T.relu(x))


def test_fc_examples():
    x = np.array([2.0, 3.0])
    np.testing.assert_array_equal(T.fc_forward(x, np.eye(2), np.zeros(2)), x)
    np.testing.assert_array_equal(T.fc_forward(np.zeros(2), np.eye(2), np.array([1.0, -1.0])), [1, -1])
    np.testing.assert_array_equal(T.fc_forward(x, np.array([[1.0, 1.0]]), np.zeros(1)), [5])
    with pytest.raises(T.ShapeError):
        T.fc_forward(np.zeros(3), np.eye(2), np.zeros(2))


def test_softmax_ce_examples():
    loss, probs, _ = T.softmax_cross_entropy(np.zeros(4), 2)
    np.testing.assert_allclose(probs, 0.25)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    loss, _, _ = T.softmax_cross_entropy(np.array([10.0, -10.0]), 0)
    assert loss < 1e-4
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(np.zeros(3), 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(logits, shift):
    z = np.array(logits)
    l1, p1, _ = T.softmax_cross_entropy(z, 0)
    l2, p2, _ = T.softmax_cross_entropy(z + shift, 0)
    assert abs(p1.sum() - 1) <= 1e-6
    np.testing.assert_allclose(p1, p2, atol=1e-9)
    assert l1 == pytest.approx(l2, abs=1e-9)


def test_finite_diff_examples():
    g = T.finite_diff_grad(lambda x: np.sum(x ** 2), np.array([1.0, 2.0]), 1e-3)
    np.testing.assert_allclose(g, [2, 4], atol=1e-5)
    np.testing.assert_array_equal(T.finite_diff_grad(lambda x: 3.0, np.array([1.0, 2.0])), [0, 0])
    g = T.finite_diff_grad(lambda x: x[0] * x[1], np.array([3.0, 5.0]))
    np.testing.assert_allclose(g, [5, 3], atol=1e-6)


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore", divide="ignore"):
        T.finite_diff_grad(lambda x: np.log(x[0]), np.array([0.0]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4))
def test_serialization_roundtrip(shape):
    t = np.random.default_rng(len(shape)).normal(size=shape).astype(np.float32)
    back = T.tensor_from_bytes(T.tensor_to_bytes(t), shape)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, t)
