import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onedconv import nn
from onedconv.gradcheck import finite_diff

import oracles


def identity_kernel(c_out=1, c_in=1, k=3):
    w = np.zeros((c_out, c_in, k, k))
    w[:, :, k // 2, k // 2] = 1
    return w


def test_identity_kernel():
    x = np.arange(1.0, 10).reshape(1, 1, 3, 3)
    spec = nn.ConvSpec(1, 1, 3, has_bias=False)
    y = nn.conv2d_forward(x, spec, nn.ConvWeights(identity_kernel()))
    assert np.array_equal(y, x)


def test_all_ones():
    spec = nn.ConvSpec(1, 1, 3, has_bias=False)
    y = nn.conv2d_forward(np.ones((1, 1, 3, 3)), spec, nn.ConvWeights(np.ones((1, 1, 3, 3))))
    assert y[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_zero_kernel_bias(rng):
    spec = nn.ConvSpec(2, 3, 3)
    y = nn.conv2d_forward(rng.standard_normal((2, 2, 5, 4)), spec,
                          nn.ConvWeights(np.zeros((3, 2, 3, 3)), np.full(3, 1.5)))
    assert np.all(y == 1.5)


def test_conv_matches_scalar_oracle(rng):
    x = rng.standard_normal((1, 1, 6, 5))
    k = rng.standard_normal((1, 1, 3, 3))
    y = nn.conv2d_forward(x, nn.ConvSpec(1, 1, 3, has_bias=False), nn.ConvWeights(k))
    np.testing.assert_allclose(y[0, 0], oracles.conv2d_single(x[0, 0].tolist(), k[0, 0].tolist()),
                               atol=1e-12)


@pytest.mark.parametrize("k,s,h,w", [(3, 1, 32, 32), (3, 2, 32, 32), (5, 2, 7, 9), (1, 1, 4, 4)])
def test_output_extents(k, s, h, w):
    spec = nn.ConvSpec(1, 1, k, s)
    y = nn.conv2d_forward(np.zeros((1, 1, h, w)), spec, nn.ConvWeights(np.zeros((1, 1, k, k)), np.zeros(1)))
    assert y.shape[2:] == ((h + 2 * (k // 2) - k) // s + 1, (w + 2 * (k // 2) - k) // s + 1)


def test_channel_mismatch():
    spec = nn.ConvSpec(2, 1, 3)
    with pytest.raises(ValueError):
        nn.conv2d_forward(np.zeros((1, 3, 4, 4)), spec, nn.ConvWeights(np.zeros((1, 2, 3, 3)), np.zeros(1)))


def test_spec_rejects_even_kernel():
    with pytest.raises(ValueError):
        nn.ConvSpec(1, 1, 4)


def test_backward_zero_grad(rng):
    spec = nn.ConvSpec(2, 3, 3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = nn.ConvWeights(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    dx, dk, db = nn.conv2d_backward(x, spec, w, np.zeros((1, 3, 4, 4)))
    assert not dx.any() and not dk.any() and not db.any()


def test_backward_identity_case():
    x = np.arange(1.0, 10).reshape(1, 1, 3, 3)
    spec = nn.ConvSpec(1, 1, 3, has_bias=False)
    dx, dk, db = nn.conv2d_backward(x, spec, nn.ConvWeights(identity_kernel()), np.ones((1, 1, 3, 3)))
    assert np.all(dx == 1)
    assert dk[0, 0, 1, 1] == x.sum()
    assert db is None


def test_backward_shape_mismatch(rng):
    spec = nn.ConvSpec(1, 1, 3)
    w = nn.ConvWeights(np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        nn.conv2d_backward(np.zeros((1, 1, 4, 4)), spec, w, np.zeros((1, 1, 3, 3)))


def test_conv_finite_differences(rng):
    spec = nn.ConvSpec(2, 2, 3, 2)
    x = rng.standard_normal((2, 2, 5, 5))
    w = nn.ConvWeights(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2))
    r = rng.standard_normal((2, 2, 3, 3))
    dx, dk, _ = nn.conv2d_backward(x, spec, w, r)
    num = finite_diff(lambda v: (nn.conv2d_forward(v, spec, w) * r).sum(), x)
    np.testing.assert_allclose(dx, num, rtol=1e-6, atol=1e-9)
    num = finite_diff(lambda v: (nn.conv2d_forward(x, spec, nn.ConvWeights(v, w.bias)) * r).sum(), w.kernel)
    np.testing.assert_allclose(dk, num, rtol=1e-6, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-2, 2), st.integers(-2, 2))
def test_translation_equivariance(seed, dh, dw):
    r = np.random.default_rng(seed)
    x = np.zeros((1, 1, 16, 16))
    x[0, 0, 5:11, 5:11] = r.standard_normal((6, 6))
    spec = nn.ConvSpec(1, 2, 3, has_bias=False)
    w = nn.ConvWeights(r.standard_normal((2, 1, 3, 3)))
    y = nn.conv2d_forward(x, spec, w)
    ys = nn.conv2d_forward(np.roll(x, (dh, dw), axis=(2, 3)), spec, w)
    np.testing.assert_allclose(np.roll(y, (dh, dw), axis=(2, 3)), ys, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    spec = nn.ConvSpec(2, 2, 3, has_bias=False)
    w = nn.ConvWeights(r.standard_normal((2, 2, 3, 3)))
    x1, x2 = r.standard_normal((2, 1, 2, 5, 5))
    lhs = nn.conv2d_forward(a * x1 + b * x2, spec, w)
    rhs = a * nn.conv2d_forward(x1, spec, w) + b * nn.conv2d_forward(x2, spec, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_batchnorm_constant_input():
    x = np.full((4, 2, 3, 3), 7.0)
    y, _ = nn.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
    assert np.all(y == 0)


def test_batchnorm_running_stats(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    nn.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv)
    n = 8 * 16
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    y, _ = nn.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, train=False)
    np.testing.assert_allclose(y, (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-5))


def test_maxpool():
    y, cache = nn.maxpool_forward(np.array([[[[1.0, 2], [3, 4]]]]), 2)
    assert y.item() == 4
    dx = nn.maxpool_backward(cache, np.ones((1, 1, 1, 1)))
    assert dx[0, 0].tolist() == [[0, 0], [0, 1]]


def test_maxpool_3x3_stride2_padded(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    y, _ = nn.maxpool_forward(x, 3, 2, 1)
    assert y.shape == (1, 2, 4, 4)
    assert y[0, 0, 0, 0] == x[0, 0, :2, :2].max()


def test_global_avgpool(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y, cache = nn.avgpool_forward(x)
    np.testing.assert_allclose(y[..., 0, 0], x.mean(axis=(2, 3)))
    g = rng.standard_normal(y.shape)
    num = finite_diff(lambda v: (nn.avgpool_forward(v)[0] * g).sum(), x)
    np.testing.assert_allclose(nn.avgpool_backward(cache, g), num, rtol=1e-6)


def test_fc_identity(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(nn.fc_forward(x, np.eye(4), np.zeros(4)), x)


def test_cross_entropy_uniform():
    loss, grad = nn.softmax_cross_entropy(np.zeros((5, 10)), [0, 1, 2, 3, 4])
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_confident():
    logits = np.zeros((1, 10))
    logits[0, 3] = 100
    loss, _ = nn.softmax_cross_entropy(logits, [3])
    assert loss < 1e-40


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((2, 10)), [0, 10])


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((6, 10))
    labels = rng.integers(0, 10, 6)
    _, grad = nn.softmax_cross_entropy(logits, labels)
    num = finite_diff(lambda v: nn.softmax_cross_entropy(v, labels)[0], logits)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)


def test_sgd_fixed_point():
    p = {"w": np.array([1.0])}
    st_ = nn.SgdState(0.1, 0.9, 0.0)
    nn.sgd_step(p, {"w": np.array([0.0])}, st_)
    assert p["w"][0] == 1.0 and st_.velocity["w"][0] == 0.0


def test_sgd_plain():
    p = {"w": np.array([1.0])}
    nn.sgd_step(p, {"w": np.array([1.0])}, nn.SgdState(0.1, 0.0, 0.0))
    assert p["w"][0] == pytest.approx(0.9)


def test_sgd_weight_decay():
    p = {"w": np.array([1.0])}
    st_ = nn.SgdState(0.1, 0.0, 5e-3)
    nn.sgd_step(p, {"w": np.array([1.0])}, st_)
    assert st_.velocity["w"][0] == pytest.approx(1.005, abs=1e-15)
    assert p["w"][0] == pytest.approx(0.8995, abs=1e-15)


def test_sgd_momentum_accumulates():
    p = {"w": np.array([0.0])}
    st_ = nn.SgdState(1.0, 0.9, 0.0)
    for _ in range(2):
        nn.sgd_step(p, {"w": np.array([1.0])}, st_)
    assert st_.velocity["w"][0] == pytest.approx(1.9)
    assert p["w"][0] == pytest.approx(-2.9)
