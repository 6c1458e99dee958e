import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import check_layer_grads
from ressfl.errors import BackwardError, NonFiniteError, ShapeError
from ressfl.layers import (Conv2D, ConvTranspose2D, Dense, Flatten, MaxPool2x2, ReLU, Residual, Sequential,
                           Sigmoid, backward, forward)
from ressfl.optim import SGD, Adam, adam_step, sgd_step, step_decay_lr
from ressfl.tensor import Tensor


def test_relu_example():
    assert np.array_equal(ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_identity_conv():
    conv = Conv2D(1, 1, kernel=1)
    conv.params["weight"].data[:] = 1.0
    x = np.random.default_rng(0).random((2, 1, 5, 4))
    assert np.array_equal(conv.forward(x), x)


def test_conv_all_ones_center():
    conv = Conv2D(1, 1, kernel=3, stride=1, padding=1)
    conv.params["weight"].data[:] = 1.0
    out = conv.forward(np.eye(3)[None, None])
    assert out[0, 0, 1, 1] == 3.0


def test_conv_matches_direct_oracle():
    rng = np.random.default_rng(1)
    conv = Conv2D(2, 3, kernel=3, stride=2, padding=1, rng=rng)
    x = rng.normal(size=(2, 2, 7, 6))
    w, b = conv.params["weight"].data, conv.params["bias"].data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 3, ho, wo))
    for n in range(2):
        for o in range(3):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    assert np.allclose(conv.forward(x), ref, atol=1e-12)


def test_dense_grad_is_input():
    d = Dense(3, 1)
    x = np.array([[1.0, 2.0, 3.0]])
    d.forward(x)
    d.backward(np.ones((1, 1)))
    assert np.allclose(d.params["weight"].grad, x)


def test_backward_without_forward():
    with pytest.raises(BackwardError):
        Dense(2, 2).backward(np.ones((1, 2)))
    d = Dense(2, 2)
    d.forward(np.ones((1, 2)))
    d.backward(np.ones((1, 2)))
    with pytest.raises(BackwardError):
        d.backward(np.ones((1, 2)))


def test_shape_errors_name_layer():
    with pytest.raises(ShapeError, match="Conv2D"):
        Conv2D(3, 4).forward(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ShapeError):
        Dense(4, 2).forward(np.zeros((1, 3)))


def test_non_finite_is_error():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    net = Sequential([Dense(2, 2)])
    with pytest.raises(NonFiniteError):
        net.forward(np.array([[np.inf, 0.0]]))


def test_module_level_forward_backward():
    rng = np.random.default_rng(2)
    net = Sequential([Dense(3, 4, rng=rng), ReLU(), Dense(4, 2, rng=rng)])
    x = rng.normal(size=(5, 3))
    y = forward(net, x)
    grads, dx = backward(net, np.ones_like(y))
    assert set(grads) == {"0.weight", "0.bias", "2.weight", "2.bias"}
    assert dx.shape == x.shape


@pytest.mark.parametrize("make,shape", [
    (lambda r: Conv2D(2, 3, 3, 1, rng=r), (2, 2, 5, 5)),
    (lambda r: Conv2D(2, 2, 3, 2, 1, rng=r), (2, 2, 6, 5)),
    (lambda r: ConvTranspose2D(2, 3, 3, 2, 1, 1, rng=r), (2, 2, 3, 3)),
    (lambda r: ConvTranspose2D(3, 1, 3, 1, 1, 0, rng=r), (1, 3, 4, 4)),
    (lambda r: Dense(6, 4, rng=r), (3, 6)),
    (lambda r: Sigmoid(), (2, 3, 4)),
    (lambda r: MaxPool2x2(), (2, 2, 4, 5)),
    (lambda r: Flatten(), (2, 2, 3, 3)),
    (lambda r: Residual([Conv2D(2, 2, 3, 1, 1, rng=r), ReLU(), Conv2D(2, 2, 3, 1, 1, rng=r)]), (1, 2, 4, 4)),
])
def test_layer_gradients(make, shape):
    rng = np.random.default_rng(3)
    assert check_layer_grads(make(rng), rng.normal(size=shape), rng) < 1e-6


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    x[np.abs(x) < 0.1] = 0.5
    assert check_layer_grads(ReLU(), x, rng) < 1e-6


def test_transpose_conv_is_conv_adjoint():
    rng = np.random.default_rng(5)
    k = rng.normal(size=(3, 2, 3, 3))  # Conv2D weight [out=3, in=2]
    conv = Conv2D(2, 3, 3, 2, 1)
    conv.params["weight"].data = k.copy()
    conv.params["bias"].data[:] = 0
    x = rng.normal(size=(1, 2, 6, 6))
    y = conv.forward(x)
    g = rng.normal(size=y.shape)
    dx = conv.backward(g)
    tconv = ConvTranspose2D(3, 2, 3, 2, 1, 1)
    tconv.params["weight"].data = k.copy()  # [Cin=3, Cout=2]
    tconv.params["bias"].data[:] = 0
    assert np.allclose(tconv.forward(g), dx, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), k=st.integers(1, 4), s=st.integers(1, 3),
       h=st.integers(1, 9), w=st.integers(1, 9))
def test_conv_shape_algebra(c, o, k, s, h, w):
    conv = Conv2D(c, o, k, s)
    try:
        expected = conv.output_shape((c, h, w))
    except ShapeError:
        return
    assert conv.forward(np.zeros((2, c, h, w))).shape == (2, *expected)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), k=st.integers(1, 4), s=st.integers(1, 3),
       op=st.integers(0, 2), h=st.integers(1, 6))
def test_transpose_shape_algebra(c, o, k, s, op, h):
    if op >= s:
        with pytest.raises(ValueError):
            ConvTranspose2D(c, o, k, s, 0, op)
        return
    t = ConvTranspose2D(c, o, k, s, min(k // 2, 1), op)
    try:
        expected = t.output_shape((c, h, h))
    except ShapeError:
        return
    assert t.forward(np.zeros((1, c, h, h))).shape == (1, *expected)


def test_frozen_layer_keeps_params():
    d = Dense(2, 2, rng=np.random.default_rng(0))
    d.freeze()
    before = d.params["weight"].data.copy()
    opt = SGD([p for _, p in d.named_params()], lr=0.1)
    d.forward(np.ones((1, 2)))
    d.backward(np.ones((1, 2)))
    assert d.params["weight"].grad is not None
    opt.step()
    assert np.array_equal(d.params["weight"].data, before)


def _scalar_param(v=1.0):
    return Tensor(np.array([v]), "w")


def test_sgd_examples():
    p = _scalar_param()
    sgd_step(SGD([p], lr=0.1, momentum=0), [p], [np.array([1.0])])
    assert np.isclose(p.data[0], 0.9)
    p = _scalar_param()
    sgd_step(SGD([p], lr=0.1, momentum=0), [p], [np.array([0.0])])
    assert p.data[0] == 1.0
    p = _scalar_param()
    opt = SGD([p], lr=0.1, momentum=0.9)
    opt.step([np.array([1.0])])
    assert np.isclose(p.data[0], 0.9)
    opt.step([np.array([1.0])])
    assert np.isclose(p.data[0], 0.9 - 0.19)


def test_sgd_shape_mismatch():
    p = _scalar_param()
    with pytest.raises(ShapeError):
        sgd_step(SGD([p], lr=0.1), [p], [np.ones(2)])
    with pytest.raises(TypeError):
        sgd_step(Adam([p]), [p], [np.ones(1)])


def test_adam_examples():
    p = _scalar_param()
    opt = Adam([p])
    adam_step(opt, [p], [np.array([0.0])])
    assert p.data[0] == 1.0
    assert opt.step_count == 1
    p = _scalar_param()
    adam_step(Adam([p], lr=1e-3), [p], [np.array([1.0])])
    assert np.isclose(p.data[0] - 1.0, -0.001, rtol=1e-6)


def test_adam_deterministic():
    def run():
        p = _scalar_param()
        opt = Adam([p])
        for g in np.linspace(-1, 1, 7):
            opt.step([np.array([g])])
        return p.data.copy()
    assert np.array_equal(run(), run())


def test_lr_must_be_positive():
    with pytest.raises(ValueError):
        SGD([_scalar_param()], lr=0)


def test_clip_norm_rescales_joint_gradient():
    a, b = Tensor(np.zeros(1), "a"), Tensor(np.zeros(1), "b")
    opt = SGD([a, b], lr=1.0, momentum=0, clip_norm=1.0)
    opt.step([np.array([3.0]), np.array([4.0])])
    assert np.allclose([a.data[0], b.data[0]], [-0.6, -0.8])


def test_step_decay():
    assert step_decay_lr(0.05, 0, 10) == 0.05
    assert np.isclose(step_decay_lr(0.05, 5, 10), 0.01)
    assert np.isclose(step_decay_lr(0.05, 8, 10), 0.002)
