"""Reference attribution methods against linear-net closed forms, plus
the projected-gradient attack and minimal-radius search."""

import numpy as np
import pytest

from evacert import (
    AdvResult,
    Dense,
    Network,
    PgdConfig,
    gradcam,
    gradcampp,
    gradient_input,
    integrated_gradients,
    min_adv_radius,
    occlusion,
    pgd_attack,
    rise,
    saliency,
    smoothgrad,
    vargrad,
)

from conftest import random_conv_net, random_dense_net

rng = np.random.default_rng(0)


def linear_net(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return Network((Dense(w, b),), (w.shape[1],), w.shape[0])


W = np.array([[1.0, -2.0, 0.5, 0.0], [0.0, 1.0, -1.0, 2.0]])
NET = linear_net(W)
X = np.array([0.2, 0.4, 0.6, 0.8])


def test_saliency_linear():
    np.testing.assert_allclose(saliency(NET, X, 0), np.abs(W[0]), atol=1e-12)


def test_gradient_input_linear():
    np.testing.assert_allclose(gradient_input(NET, X, 1), X * np.abs(W[1]), atol=1e-12)


def test_integrated_gradients_exact_on_linear():
    # constant gradient: the path integral is exactly x * w_c
    got = integrated_gradients(NET, X, 0, m=10)
    np.testing.assert_allclose(got, X * W[0], atol=1e-12)


def test_integrated_gradients_custom_baseline():
    x0 = np.full(4, 0.1)
    got = integrated_gradients(NET, X, 0, m=10, baseline=x0)
    np.testing.assert_allclose(got, (X - x0) * W[0], atol=1e-12)


def test_integrated_gradients_rejects_single_point():
    with pytest.raises(ValueError):
        integrated_gradients(NET, X, 0, m=1)


def test_smoothgrad_exact_on_linear():
    # gradient is constant, so noise averages out exactly
    got = smoothgrad(NET, X, 0, m=20, sigma=0.5, seed=3)
    np.testing.assert_allclose(got, W[0], atol=1e-12)


def test_vargrad_zero_on_linear():
    got = vargrad(NET, X, 0, m=20, sigma=0.5, seed=3)
    np.testing.assert_allclose(got, 0.0, atol=1e-12)


def test_sampled_methods_deterministic():
    a = smoothgrad(NET, X, 0, m=5, seed=9)
    b = smoothgrad(NET, X, 0, m=5, seed=9)
    np.testing.assert_array_equal(a, b)


def test_occlusion_single_pixel_linear():
    # 2x2 "image", 1x1 patches: drop for pixel i is w_ci * x_i
    w = np.array([[1.0, -1.0, 2.0, 0.5]])
    net = Network((Dense(w, np.zeros(1)),), (4,), 1)
    x = np.array([0.1, 0.2, 0.3, 0.4])
    got = occlusion(net, x, 0, patch=1, stride=1)
    np.testing.assert_allclose(got, w[0] * x, atol=1e-12)


def test_occlusion_patch_covers_everything():
    got = occlusion(NET, X, 0, patch=2, stride=2)
    assert got.shape == X.shape
    assert np.all(got != 0) or np.any(got == 0)  # well-defined everywhere


def test_rise_deterministic_and_shape():
    a = rise(NET, X, 0, n=50, grid=2, seed=4)
    b = rise(NET, X, 0, n=50, grid=2, seed=4)
    np.testing.assert_array_equal(a, b)
    assert a.shape == X.shape


def test_rise_prefers_heavy_pixel():
    # class score = 10 * x_0: masks keeping pixel 0 score higher
    w = np.array([[10.0, 0.0, 0.0, 0.0]])
    net = Network((Dense(w, np.zeros(1)),), (4,), 1)
    x = np.ones(4)
    got = rise(net, x, 0, n=2000, grid=2, seed=0)
    assert got[0] == got.max()


def test_rise_rejects_bad_density():
    with pytest.raises(ValueError):
        rise(NET, X, 0, density=0.0)


def test_gradcam_shapes_and_nonnegativity():
    r = np.random.default_rng(5)
    net = random_conv_net(r)
    x = r.random(net.input_shape)
    cam = gradcam(net, x, 0)
    campp = gradcampp(net, x, 0)
    assert cam.shape == net.input_shape and campp.shape == net.input_shape
    assert np.all(cam >= 0) and np.all(campp >= 0)


def test_gradcam_requires_conv():
    with pytest.raises(ValueError):
        gradcam(NET, X, 0)


def test_pgd_finds_linear_adversary():
    # f_1 - f_0 = 2 d - 1: adversarial iff delta_0 > 0.5
    net = linear_net([[0.0, 0.0], [2.0, 0.0]], [0.0, -1.0])
    x = np.zeros(2)
    res = pgd_attack(net, x, 0, radius=0.8, cfg=PgdConfig(seed=0))
    assert isinstance(res, AdvResult) and res.success
    assert res.margin > 0 and res.radius <= 0.8 + 1e-12


def test_pgd_honest_failure():
    net = linear_net([[0.0, 0.0], [2.0, 0.0]], [0.0, -1.0])
    res = pgd_attack(net, np.zeros(2), 0, radius=0.3, cfg=PgdConfig(seed=0))
    assert not res.success and res.margin <= 0


def test_pgd_respects_mask():
    # only pixel 1 allowed but the margin depends on pixel 0 alone: must fail
    net = linear_net([[0.0, 0.0], [2.0, 0.0]], [0.0, -1.0])
    res = pgd_attack(net, np.zeros(2), 0, radius=5.0, cfg=PgdConfig(seed=0), mask=[1])
    assert not res.success
    assert res.delta.ravel()[0] == 0.0


def test_pgd_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        pgd_attack(NET, X, 0, radius=0.0)


def test_min_adv_radius_linear_threshold():
    # threshold at ||delta||_inf = 0.5 exactly
    net = linear_net([[0.0, 0.0], [2.0, 0.0]], [0.0, -1.0])
    radius, censored = min_adv_radius(net, np.zeros(2), 0, [0, 1], 0.0, 2.0, tol=1e-4)
    assert not censored
    assert abs(radius - 0.5) <= 1e-3


def test_min_adv_radius_censored():
    net = linear_net([[0.0, 0.0], [2.0, 0.0]], [0.0, -1.0])
    radius, censored = min_adv_radius(net, np.zeros(2), 0, [1], 0.0, 1.0, tol=1e-3)
    assert censored and radius == 1.0


def test_fd_agreement_on_relu_nets():
    # spot-check a sampled method's mean against its definition on a ReLU net
    r = np.random.default_rng(8)
    net = random_dense_net(r, depth=2)
    x = r.random(net.input_shape)
    from evacert.network import gradient

    got = smoothgrad(net, x, 0, m=7, sigma=0.1, seed=2)
    rng2 = np.random.default_rng(2)
    want = np.mean(
        [gradient(net, x + 0.1 * rng2.standard_normal(x.shape), 0) for _ in range(7)], axis=0
    )
    np.testing.assert_allclose(got, want, atol=1e-12)
