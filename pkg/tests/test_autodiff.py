import math

import numpy as np
import pytest

from repxray.autodiff import (AdamState, TrainConfig, adam_step, bn_backward, bn_forward, conv2d_backward,
                              cross_entropy_loss, dense_backward, gap_backward, grad_check, model_backward,
                              relu_backward)
from repxray.errors import ModeError, ValidationError
from repxray.model import fuse_model, init_model
from repxray.tensor import conv2d, dense, global_avg_pool, softmax

from conftest import random_bn, toy_model


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        a = f()
        flat[i] = o - eps
        b = f()
        flat[i] = o
        gf[i] = (a - b) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv_backward(rng, stride, padding, k):
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    r = rng.normal(size=conv2d(x, w, b, stride, padding).shape)
    f = lambda: float((conv2d(x, w, b, stride, padding) * r).sum())  # noqa: E731
    dx, dw, db = conv2d_backward(r, x, w, stride, padding)
    assert rel_err(dx, numeric_grad(f, x)) < 1e-4
    assert rel_err(dw, numeric_grad(f, w)) < 1e-4
    assert rel_err(db, numeric_grad(f, b)) < 1e-4


@pytest.mark.parametrize("batch_stats", [True, False])
def test_bn_backward(rng, batch_stats):
    x = rng.normal(size=(3, 2, 4, 4))
    bn = random_bn(rng, 2)
    r = rng.normal(size=x.shape)
    f = lambda: float((bn_forward(x, bn, batch_stats)[0] * r).sum())  # noqa: E731
    dx, dg, db = bn_backward(r, bn_forward(x, bn, batch_stats)[1])
    assert rel_err(dx, numeric_grad(f, x)) < 1e-4
    assert rel_err(dg, numeric_grad(f, bn.gamma)) < 1e-4
    assert rel_err(db, numeric_grad(f, bn.beta)) < 1e-4


def test_relu_backward_kink():
    pre = np.array([-1.0, 0.0, 2.0])
    assert relu_backward(np.ones(3), pre).tolist() == [0.0, 0.0, 1.0]


def test_dense_and_gap_backward(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 4))
    b = rng.normal(size=2)
    r = rng.normal(size=(3, 2))
    f = lambda: float((dense(x, w, b) * r).sum())  # noqa: E731
    dx, dw, db = dense_backward(r, x, w)
    assert rel_err(dx, numeric_grad(f, x)) < 1e-4
    assert rel_err(dw, numeric_grad(f, w)) < 1e-4
    assert rel_err(db, numeric_grad(f, b)) < 1e-4
    a = rng.normal(size=(2, 3, 4, 5))
    r2 = rng.normal(size=(2, 3))
    g = lambda: float((global_avg_pool(a).reshape(2, 3) * r2).sum())  # noqa: E731
    assert rel_err(gap_backward(r2, a.shape), numeric_grad(g, a)) < 1e-4


def test_cross_entropy():
    loss, d = cross_entropy_loss(np.array([[0.0, 0.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    loss, d = cross_entropy_loss(np.array([[1000.0, 0.0, 0.0]]), np.array([0]))
    assert loss == 0.0 and np.all(d == 0)
    with pytest.raises(ValidationError):
        cross_entropy_loss(np.zeros((1, 3)), np.array([3]))


def test_cross_entropy_gradient(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    loss, d = cross_entropy_loss(z, y)
    assert loss >= 0
    assert rel_err(d, numeric_grad(lambda: cross_entropy_loss(z, y)[0], z)) < 1e-6


def test_dense_softmax_ce_outer_product(rng):
    x = rng.normal(size=(1, 5))
    w = rng.normal(size=(3, 5))
    b = np.zeros(3)
    _, dlogits = cross_entropy_loss(dense(x, w, b), np.array([2]))
    _, dw, _ = dense_backward(dlogits, x, w)
    p = softmax(dense(x, w, b))[0]
    np.testing.assert_allclose(dw, np.outer(p - np.eye(3)[2], x[0]), atol=1e-12)


def test_head_gradients_zero_at_one_hot(rng):
    model = toy_model(1)
    x = rng.normal(size=(2, 2, 6, 6))
    model.head_w[...] = 0
    model.head_b[...] = [0.0, 800.0, 0.0]
    _, grads = model_backward(model, x, np.array([1, 1]))
    assert np.all(grads["head.w"] == 0) and np.all(grads["head.b"] == 0)


@pytest.mark.parametrize("batch_stats", [True, False])
def test_full_model_gradcheck(rng, batch_stats):
    model = toy_model(2)
    x = rng.normal(size=(4, 2, 6, 6))
    y = np.array([0, 1, 2, 1])
    params = model.parameters()
    _, grads = model_backward(model, x, y, batch_stats)
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape for k in params)
    assert grad_check(lambda p: model_backward(model, x, y, batch_stats), params) <= 1e-4


def test_model_backward_rejects_fused(rng):
    fused = fuse_model(toy_model(0))
    with pytest.raises(ModeError):
        model_backward(fused, rng.normal(size=(1, 2, 6, 6)), np.array([0]))


def test_grad_check_linear_and_quadratic():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    coeff = np.array([0.5, 2.0, -1.0])
    assert grad_check(lambda q: (float(coeff @ q["a"]), {"a": coeff.copy()}), p) < 1e-9
    sq = {"t": np.array([3.0])}
    assert grad_check(lambda q: (float(q["t"][0] ** 2), {"t": 2 * q["t"]}), sq) < 1e-9


def test_adam_zero_gradient_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    s = AdamState()
    adam_step(p, {"w": np.zeros(2)}, s)
    assert p["w"].tolist() == [1.0, -2.0]
    assert np.all(s.m["w"] == 0) and np.all(s.v["w"] == 0) and s.t == 1


def test_adam_first_step_value():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=0.001))
    assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


@pytest.mark.parametrize("g", [-3.0, -1e-4, 1e-4, 2.5])
def test_adam_first_step_sign(g):
    p = {"w": np.array([0.7])}
    adam_step(p, {"w": np.array([g])}, AdamState())
    assert np.sign(p["w"][0] - 0.7) == -np.sign(g)


def test_adam_shape_mismatch():
    with pytest.raises(ValidationError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_adam_step_counter():
    s = AdamState()
    p = {"w": np.zeros(1)}
    for k in range(1, 4):
        adam_step(p, {"w": np.ones(1)}, s)
        assert s.t == k and np.all(s.v["w"] >= 0)


def test_loss_decreases_first_five_steps(rng):
    model = init_model(0, channels=(4, 8), strides=(1, 2), input_shape=(1, 16, 16), dtype=np.float64)
    x = rng.normal(size=(8, 1, 16, 16))
    y = np.arange(8) % 3
    state = AdamState(lr=0.001)
    losses = []
    for _ in range(6):
        loss, grads = model_backward(model, x, y)
        losses.append(loss)
        adam_step(model.parameters(), grads, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_config_validation():
    assert TrainConfig().epochs == 20 and TrainConfig().learning_rate == 0.001
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0)
