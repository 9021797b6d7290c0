"""Shared fixtures: the digit dataset, a trained classifier, random nets.

The image corpus is scikit-learn's 8x8 digit set upscaled to 28x28 so the
trained fixture matches the (256, 128, 64, 32, 10) architecture and input
size used throughout; training is deterministic per seed.
"""

from __future__ import annotations

import numpy as np
import pytest

from evacert import (
    Conv2D,
    DatasetSlice,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    ReLU,
    forward_batch,
    grid_for_shape,
    mnist_mlp_config,
    train_fixture,
)

TRAIN_COUNT = 1500
SPLIT_SEED = 12345


def upscale_28(images_8x8: np.ndarray) -> np.ndarray:
    """8x8 digits -> 28x28: 2x nearest-neighbor blowup, centered on black.

    The zero margin lets regularized training drive the unused input
    weights toward zero, which keeps certified bounds informative.
    """
    up2 = np.kron(images_8x8, np.ones((1, 2, 2)))
    out = np.zeros((len(images_8x8), 28, 28))
    out[:, 6:22, 6:22] = up2
    return out


@pytest.fixture(scope="session")
def digit_data():
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = upscale_28(digits.images / 16.0)
    perm = np.random.default_rng(SPLIT_SEED).permutation(len(images))
    images, labels = images[perm], digits.target[perm]
    return {
        "train": DatasetSlice(images[:TRAIN_COUNT], labels[:TRAIN_COUNT]),
        "test": DatasetSlice(images[TRAIN_COUNT:], labels[TRAIN_COUNT:]),
    }


@pytest.fixture(scope="session")
def trained_mlp(digit_data):
    # Weight decay plus random-erasing augmentation yields a network whose
    # certified bounds are tight enough to carry per-image signal; plain
    # SGD gives bounds two orders of magnitude looser.
    net, _ = train_fixture(
        mnist_mlp_config(0),
        digit_data["train"],
        epochs=120,
        lr=0.1,
        seed=0,
        weight_decay=1e-2,
        erase_grid=grid_for_shape((784,), 12),
        erase_frac=0.45,
    )
    return net


@pytest.fixture(scope="session")
def mlp_test_accuracy(trained_mlp, digit_data):
    test = digit_data["test"]
    logits = forward_batch(trained_mlp, test.images.reshape(len(test.images), -1))
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def random_dense_net(rng, depth=None, width=None, in_size=None, classes=None, linear=False):
    depth = depth if depth is not None else int(rng.integers(1, 4))
    in_size = in_size if in_size is not None else int(rng.integers(2, 16))
    classes = classes if classes is not None else int(rng.integers(2, 6))
    layers = []
    size = in_size
    for _ in range(depth):
        out = width if width is not None else int(rng.integers(2, 16))
        layers.append(Dense(rng.normal(0, 0.7, (out, size)), rng.normal(0, 0.3, out)))
        if not linear:
            layers.append(ReLU())
        size = out
    layers.append(Dense(rng.normal(0, 0.7, (classes, size)), rng.normal(0, 0.3, classes)))
    return Network(tuple(layers), (in_size,), classes)


def random_conv_net(rng, with_pool=True):
    c_in = int(rng.integers(1, 3))
    h = w = int(rng.integers(6, 10))
    c1 = int(rng.integers(2, 5))
    k = 3
    layers = [
        Conv2D(rng.normal(0, 0.4, (c1, c_in, k, k)), rng.normal(0, 0.2, c1)),
        ReLU(),
    ]
    oh = ow = h - k + 1
    if with_pool and oh >= 2:
        layers.append(MaxPool2D((2, 2)))
        oh, ow = oh // 2, ow // 2
    layers.append(Flatten())
    classes = int(rng.integers(2, 5))
    layers.append(Dense(rng.normal(0, 0.4, (classes, c1 * oh * ow)), np.zeros(classes)))
    return Network(tuple(layers), (c_in, h, w), classes)
