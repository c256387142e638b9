"""Tensor engine: forward values against numpy oracles and gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invstreams.autodiff import (
    ShapeError,
    Tensor,
    avg_pool2d,
    batch_norm,
    clamp_min,
    concat,
    conv2d,
    depthwise_conv2d,
    dropout,
    log_softmax,
    matmul,
    max_pool2d,
    no_grad,
    softmax_cross_entropy,
    stack,
    take,
)
from invstreams.autodiff.gradcheck import check_gradients

GRAD_TOL = 1e-6


def conv_loop(x, k, padding):
    """Direct triple loop reference for conv2d (correlation, stride 1)."""
    b, c, h, w = x.shape
    o, _, kk, _ = k.shape
    r = (kk - 1) // 2
    if padding == "valid":
        xp, ho, wo = x, h - kk + 1, w - kk + 1
    elif padding == "same":
        xp, ho, wo = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r))), h, w
    else:
        xp, ho, wo = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="wrap"), h, w
    out = np.zeros((b, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = np.einsum("bcij,ocij->bo", xp[:, :, i:i + kk, j:j + kk], k)
    return out


@pytest.mark.parametrize("padding", ["same", "valid", "periodic"])
def test_conv2d_matches_loop(rng, padding):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), 1, padding).data, conv_loop(x, k, padding), atol=1e-12)


def test_conv2d_stride_subsamples(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    k = rng.normal(size=(3, 2, 3, 3))
    full = conv2d(Tensor(x), Tensor(k), 1, "same").data
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), 2, "same").data, full[:, :, ::2, ::2], atol=1e-12)


@pytest.mark.parametrize("padding,stride", [("same", 1), ("valid", 1), ("periodic", 1), ("same", 2)])
def test_conv2d_gradients(rng, padding, stride):
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=conv2d(Tensor(x), Tensor(k), stride, padding).shape)
    err = check_gradients(lambda a, b: (conv2d(a, b, stride, padding) * Tensor(w)).sum(), [x, k])
    assert err < GRAD_TOL


def test_conv2d_shape_errors(rng):
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), Tensor(rng.normal(size=(1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.normal(size=(2, 5, 5))), Tensor(rng.normal(size=(1, 2, 3, 3))))


def test_depthwise_matches_per_channel_conv(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(3, 3, 3))
    ref = np.concatenate([conv_loop(x[:, c:c + 1], k[c][None, None], "periodic") for c in range(3)], axis=1)
    np.testing.assert_allclose(depthwise_conv2d(Tensor(x), Tensor(k), "periodic").data, ref, atol=1e-12)
    err = check_gradients(lambda a, b: (depthwise_conv2d(a, b, "same") ** 2).sum(), [x, k])
    assert err < GRAD_TOL


def test_pooling_values_and_gradients(rng):
    x = rng.normal(size=(2, 2, 4, 6))
    mp = max_pool2d(Tensor(x), 2).data
    np.testing.assert_allclose(mp, x.reshape(2, 2, 2, 2, 3, 2).max(axis=(3, 5)))
    ap = avg_pool2d(Tensor(x), 2).data
    np.testing.assert_allclose(ap, x.reshape(2, 2, 2, 2, 3, 2).mean(axis=(3, 5)))
    assert check_gradients(lambda a: (max_pool2d(a, 2) ** 2).sum(), [x]) < GRAD_TOL
    assert check_gradients(lambda a: (avg_pool2d(a, 2) ** 2).sum(), [x]) < GRAD_TOL


def test_elementwise_and_reduction_gradients(rng):
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    fns = [
        lambda x, y: (x * y + x / y - y).sum(),
        lambda x, y: ((x ** 1.7) * y).mean(),
        lambda x, y: (x.max(axis=1) * y[:3]).sum(),
        lambda x, y: matmul(x, y.reshape(4, 1)).sum(),
        lambda x, y: (clamp_min(x - 1.0, 0.1) * y).sum(),
        lambda x, y: (x.exp().log() * y).sum(),
        lambda x, y: (concat([x, x * 2.0], axis=0).sum(axis=0) * y).sum(),
        lambda x, y: (stack([x, x], axis=2).sum(axis=2) * y).sum(),
        lambda x, y: (take(x, [2, 0, 2], axis=1) ** 2).sum() + y.sum(),
        lambda x, y: (x.T.reshape(2, 6) ** 2).sum() + (y * y).sum(),
    ]
    for fn in fns:
        assert check_gradients(fn, [a, b]) < GRAD_TOL


def test_softmax_cross_entropy(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    z = logits - logits.max(axis=1, keepdims=True)
    ref = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(5), labels])
    assert softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(ref, abs=1e-14)
    assert check_gradients(lambda a: softmax_cross_entropy(a, labels), [logits]) < GRAD_TOL
    assert check_gradients(lambda a: (log_softmax(a) * Tensor(logits)).sum(), [logits]) < GRAD_TOL


def test_batch_norm_train_and_eval(rng):
    x = rng.normal(2.0, 3.0, size=(6, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    y = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, True, 0.1)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    ref = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) * gamma[None, :, None, None] \
        + beta[None, :, None, None]
    np.testing.assert_allclose(y.data, ref, atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    err = check_gradients(lambda a, g, b: (batch_norm(a, g, b, np.zeros(3), np.ones(3), True) ** 3).sum(),
                          [x, gamma, beta])
    assert err < GRAD_TOL
    ev = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, False).data
    np.testing.assert_allclose(ev, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
                               * gamma[None, :, None, None] + beta[None, :, None, None], atol=1e-12)


def test_dropout_modes(rng):
    x = Tensor(np.ones((100, 50)))
    assert dropout(x, 0.5, training=False) is x
    y = dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(y, dropout(x, 0.5, True, np.random.default_rng(0)).data)
    with pytest.raises(ValueError):
        dropout(x, 0.5, True, None)


def test_no_grad_records_nothing(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    with no_grad():
        b = (a * 2.0).sum()
    assert not b.requires_grad


def test_gradient_accumulates_over_shared_use(rng):
    a = Tensor(rng.normal(size=4), requires_grad=True)
    ((a * a).sum() + a.sum()).backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_broadcast_gradients_property(x, y):
    a, b = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    (a * b + b).sum().backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(y, (3, 4)))
    np.testing.assert_allclose(b.grad, x.sum(axis=0) + 3.0)
