"""Forward/backward correctness of the inference engine.

Gradients are checked against central finite differences (h = 1e-5,
1e-4 relative tolerance); structural invariants are asserted directly.
"""

import numpy as np
import pytest

from evacert import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    ReLU,
    ShapeError,
    Softmax,
    forward,
    forward_batch,
    forward_probs,
    gradient,
)
from evacert.network import activation_at, as_tensor, stable_softmax

from conftest import random_conv_net, random_dense_net

rng = np.random.default_rng(7)


def fd_gradient(net, x, c, h=1e-5):
    x = x.ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (
            forward(net, xp.reshape(net.input_shape))[c]
            - forward(net, xm.reshape(net.input_shape))[c]
        ) / (2 * h)
    return g.reshape(net.input_shape)


def test_dense_forward_oracle():
    w = np.array([[1.0, 2.0], [0.0, -1.0]])
    b = np.array([0.5, 0.0])
    net = Network((Dense(w, b),), (2,), 2)
    np.testing.assert_allclose(forward(net, [1.0, 1.0]), [3.5, -1.0])


def test_relu_and_softmax_forward():
    net = Network((Dense(np.eye(2), np.array([-0.5, 0.5])), ReLU(), Dense(np.eye(2), np.zeros(2))), (2,), 2)
    np.testing.assert_allclose(forward(net, [0.0, 0.0]), [0.0, 0.5])
    p = forward_probs(net, [0.0, 0.0])
    assert np.isclose(p.sum(), 1.0) and np.all(p > 0)


def test_stable_softmax_no_overflow():
    p = stable_softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(p).all() and np.isclose(p.sum(), 1.0)


def test_conv_forward_oracle():
    # 1 channel, 3x3 input, 2x2 kernel of ones: outputs are window sums
    x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
    k = np.ones((1, 1, 2, 2))
    net = Network((Conv2D(k, np.zeros(1)), Flatten(), Dense(np.eye(4), np.zeros(4))), (1, 3, 3), 4)
    np.testing.assert_allclose(forward(net, x), [8.0, 12.0, 20.0, 24.0])


def test_maxpool_forward_oracle():
    x = np.array([[[1.0, 2.0], [3.0, 0.0]]])
    net = Network((MaxPool2D((2, 2)), Flatten(), Dense(np.eye(1) * 2, np.zeros(1))), (1, 2, 2), 1)
    np.testing.assert_allclose(forward(net, x), [6.0])


def test_forward_batch_matches_single():
    net = random_dense_net(np.random.default_rng(0), depth=2)
    xs = rng.random((5,) + net.input_shape)
    batch = forward_batch(net, xs)
    singles = np.stack([forward(net, x) for x in xs])
    np.testing.assert_allclose(batch, singles, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_gradient_matches_fd_dense(seed):
    r = np.random.default_rng(seed)
    net = random_dense_net(r)
    x = r.random(net.input_shape)
    c = int(r.integers(net.class_count))
    g = gradient(net, x, c)
    fd = fd_gradient(net, x, c)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_fd_conv(seed):
    r = np.random.default_rng(100 + seed)
    net = random_conv_net(r)
    x = r.random(net.input_shape)
    c = int(r.integers(net.class_count))
    g = gradient(net, x, c)
    fd = fd_gradient(net, x, c)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_gradient_wrt_probs_matches_fd():
    r = np.random.default_rng(42)
    net = random_dense_net(r, depth=2)
    x = r.random(net.input_shape)
    c = 0
    g = gradient(net, x, c, wrt_probs=True)
    h = 1e-5
    fd = np.empty(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (forward_probs(net, xp)[c] - forward_probs(net, xm)[c]) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_as_tensor_rejects_nonfinite_and_bad_shape():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan], (2,))
    with pytest.raises(ShapeError):
        as_tensor([1.0, 2.0, 3.0], (2,))


def test_network_shape_validation():
    with pytest.raises(ValueError):
        Network((Dense(np.eye(3), np.zeros(3)),), (2,), 3)
    with pytest.raises(ValueError):  # softmax only allowed as last layer
        Network((Softmax(), Dense(np.eye(2), np.zeros(2))), (2,), 2)


def test_split_index_strictly_interior():
    layers = (Dense(np.eye(2), np.zeros(2)), ReLU(), Dense(np.eye(2), np.zeros(2)))
    with pytest.raises(ValueError):
        Network(layers, (2,), 2, split_index=0)
    with pytest.raises(ValueError):
        Network(layers, (2,), 2, split_index=3)
    net = Network(layers, (2,), 2, split_index=2)
    a = activation_at(net, [1.0, -1.0], 2)
    np.testing.assert_allclose(a, [1.0, 0.0])


def test_activation_composition():
    # forward == suffix(prefix) at any interior split
    r = np.random.default_rng(3)
    net = random_dense_net(r, depth=3, width=6, in_size=5)
    x = r.random(5)
    full = forward(net, x)
    for split in range(1, len(net.layers)):
        a = activation_at(net, x, split)
        z = a
        for layer in net.layers[split:]:
            from evacert.network import _apply_layer

            z, _ = _apply_layer(layer, z)
        np.testing.assert_allclose(full, z, atol=1e-12)
