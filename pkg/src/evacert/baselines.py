"""Reference attribution methods and the projected-gradient machinery
used by the robustness metric.

Gradient-based maps operate on the logit of the class of interest. Every
sampled method takes an explicit seed and is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import (
    Conv2D,
    Network,
    as_tensor,
    feature_maps_and_grads,
    forward,
    forward_batch,
    gradient,
    input_gradient,
)

__all__ = [
    "PgdConfig",
    "AdvResult",
    "saliency",
    "gradient_input",
    "integrated_gradients",
    "smoothgrad",
    "vargrad",
    "gradcam",
    "gradcampp",
    "occlusion",
    "rise",
    "pgd_attack",
    "min_adv_radius",
]


def saliency(net: Network, x, c: int) -> np.ndarray:
    """Absolute input gradient of the class logit."""
    return np.abs(gradient(net, x, c))


def gradient_input(net: Network, x, c: int) -> np.ndarray:
    x = as_tensor(x, net.input_shape)
    return x * np.abs(gradient(net, x, c))


def integrated_gradients(net: Network, x, c: int, m: int = 100, baseline=None) -> np.ndarray:
    """Path-integrated gradients from a zero baseline, trapezoidal rule."""
    if m < 2:
        raise ValueError("need at least two integration points")
    x = as_tensor(x, net.input_shape)
    x0 = np.zeros_like(x) if baseline is None else as_tensor(baseline, net.input_shape)
    alphas = np.linspace(0.0, 1.0, m)
    grads = np.stack([gradient(net, x0 + a * (x - x0), c) for a in alphas])
    weights = np.full(m, 1.0 / (m - 1))
    weights[[0, -1]] = 0.5 / (m - 1)
    avg = np.tensordot(weights, grads, axes=1)
    return (x - x0) * avg


def smoothgrad(net: Network, x, c: int, m: int = 100, sigma: float = 0.2, seed: int = 0) -> np.ndarray:
    """Mean gradient over Gaussian-perturbed copies of the input."""
    x = as_tensor(x, net.input_shape)
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(x)
    for _ in range(m):
        acc += gradient(net, x + sigma * rng.standard_normal(x.shape), c)
    return acc / m


def vargrad(net: Network, x, c: int, m: int = 100, sigma: float = 0.2, seed: int = 0) -> np.ndarray:
    x = as_tensor(x, net.input_shape)
    rng = np.random.default_rng(seed)
    grads = np.stack(
        [gradient(net, x + sigma * rng.standard_normal(x.shape), c) for _ in range(m)]
    )
    return grads.var(axis=0)


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if h == 1 and w == 1:
        return np.full((out_h, out_w), img[0, 0])
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.clip(ys.astype(int), 0, h - 2) if h > 1 else np.zeros(out_h, int)
    x0 = np.clip(xs.astype(int), 0, w - 2) if w > 1 else np.zeros(out_w, int)
    wy = (ys - y0) if h > 1 else np.zeros(out_h)
    wx = (xs - x0) if w > 1 else np.zeros(out_w)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, np.minimum(x0 + 1, w - 1)] * wx
    bot = img[np.minimum(y0 + 1, h - 1)][:, x0] * (1 - wx) + img[
        np.minimum(y0 + 1, h - 1)
    ][:, np.minimum(x0 + 1, w - 1)] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def _last_conv_index(net: Network) -> int:
    idx = [i for i, l in enumerate(net.layers) if isinstance(l, Conv2D)]
    if not idx:
        raise ValueError("model has no convolutional layer")
    return idx[-1]


def _upsample_to_input(weighted: np.ndarray, net: Network) -> np.ndarray:
    if len(net.input_shape) == 3:
        _, h, w = net.input_shape
        up = _bilinear_resize(weighted, h, w)
        return np.broadcast_to(up, net.input_shape).copy()
    return _bilinear_resize(weighted, *net.input_shape)


def gradcam(net: Network, x, c: int, layer: int | None = None) -> np.ndarray:
    """Gradient-pooled weighting of conv feature maps, upsampled to input size."""
    layer = _last_conv_index(net) if layer is None else layer
    maps, grads = feature_maps_and_grads(net, x, c, layer)
    alphas = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alphas, maps, axes=1), 0.0)
    return _upsample_to_input(cam, net)


def gradcampp(net: Network, x, c: int, layer: int | None = None) -> np.ndarray:
    """Grad-CAM++ weighting via powers of the first derivatives (the exact
    higher-order terms vanish for piecewise-linear nets)."""
    layer = _last_conv_index(net) if layer is None else layer
    maps, grads = feature_maps_and_grads(net, x, c, layer)
    g2 = grads**2
    g3 = grads**3
    denom = 2.0 * g2 + (maps.sum(axis=(1, 2))[:, None, None] * g3)
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    alpha = np.where(np.abs(denom) > 1e-12, g2 / safe, 0.0)
    weights = (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, maps, axes=1), 0.0)
    return _upsample_to_input(cam, net)


def occlusion(net: Network, x, c: int, patch: int = 4, stride: int = 4, baseline: float = 0.0) -> np.ndarray:
    """Score drop when a sliding patch is set to the baseline value."""
    x = as_tensor(x, net.input_shape)
    base_score = forward(net, x)[c]
    scores = np.zeros_like(x)
    counts = np.zeros_like(x)
    if len(net.input_shape) == 3:
        _, h, w = net.input_shape
    else:
        side = int(round(np.sqrt(net.input_shape[0])))
        h = w = side
    img = x.reshape(-1, h, w)
    for i in range(0, h - patch + 1, stride):
        for j in range(0, w - patch + 1, stride):
            pert = img.copy()
            pert[:, i : i + patch, j : j + patch] = baseline
            drop = base_score - forward(net, pert.reshape(net.input_shape))[c]
            scores.reshape(-1, h, w)[:, i : i + patch, j : j + patch] += drop
            counts.reshape(-1, h, w)[:, i : i + patch, j : j + patch] += 1.0
    return scores / np.maximum(counts, 1.0)


def rise(
    net: Network,
    x,
    c: int,
    n: int = 6000,
    grid: int = 7,
    density: float = 0.5,
    seed: int = 0,
) -> np.ndarray:
    """Randomly masked probing with low-resolution Bernoulli masks."""
    if not 0 < density <= 1:
        raise ValueError("mask density must lie in (0, 1]")
    x = as_tensor(x, net.input_shape)
    if len(net.input_shape) == 3:
        _, h, w = net.input_shape
    else:
        side = int(round(np.sqrt(net.input_shape[0])))
        h = w = side
    rng = np.random.default_rng(seed)
    cell_h = -(-h // grid)
    cell_w = -(-w // grid)
    acc = np.zeros((h, w))
    for _ in range(n):
        coarse = (rng.random((grid, grid)) < density).astype(np.float64)
        big = _bilinear_resize(coarse, (grid + 1) * cell_h, (grid + 1) * cell_w)
        oy = rng.integers(0, cell_h + 1)
        ox = rng.integers(0, cell_w + 1)
        mask = big[oy : oy + h, ox : ox + w]
        masked = (x.reshape(-1, h, w) * mask).reshape(net.input_shape)
        acc += forward(net, masked)[c] * mask
    flat = acc / (density * n)
    if len(net.input_shape) == 3:
        return np.broadcast_to(flat, net.input_shape).copy()
    return flat.reshape(net.input_shape)


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 50
    step_size: float | None = None  # defaults to radius / 10
    restarts: int = 3
    seed: int = 0
    clip_range: tuple[float, float] | None = None


@dataclass(frozen=True)
class AdvResult:
    delta: np.ndarray
    success: bool
    radius: float
    iterations: int
    margin: float


def _margin_and_grad(net: Network, x, c: int):
    logits = forward(net, x)
    vals = logits - logits[c]
    vals[c] = -np.inf
    adv = int(np.argmax(vals))
    seed_vec = np.zeros(net.class_count)
    seed_vec[adv] = 1.0
    seed_vec[c] = -1.0
    return float(vals[adv]), input_gradient(net, x, seed_vec)


def pgd_attack(
    net: Network,
    x,
    c: int,
    radius: float,
    cfg: PgdConfig = PgdConfig(),
    mask=None,
) -> AdvResult:
    """Projected gradient ascent on the best wrong-class margin.

    The perturbation is restricted to the allowed variable set when a mask
    is given. Failure to find an adversarial example is reported honestly;
    it is not a robustness certificate.
    """
    if radius <= 0:
        raise ValueError("attack radius must be positive")
    x = as_tensor(x, net.input_shape)
    allowed = np.zeros(x.size, dtype=bool)
    if mask is None:
        allowed[:] = True
    else:
        allowed[np.asarray(mask, dtype=np.int64)] = True
    allowed = allowed.reshape(x.shape)
    step = cfg.step_size if cfg.step_size is not None else radius / 10.0
    rng = np.random.default_rng(cfg.seed)

    best_margin = -np.inf
    best_delta = np.zeros_like(x)
    iters = 0
    for restart in range(cfg.restarts):
        if restart == 0:
            delta = np.zeros_like(x)
        else:
            delta = rng.uniform(-radius, radius, x.shape) * allowed
        for _ in range(cfg.steps):
            iters += 1
            margin, grad = _margin_and_grad(net, x + delta, c)
            if margin > best_margin:
                best_margin = margin
                best_delta = delta.copy()
            if margin > 0:
                break
            delta = np.clip(delta + step * np.sign(grad), -radius, radius) * allowed
            if cfg.clip_range is not None:
                delta = np.clip(delta, cfg.clip_range[0] - x, cfg.clip_range[1] - x) * allowed
        margin, _ = _margin_and_grad(net, x + delta, c)
        if margin > best_margin:
            best_margin = margin
            best_delta = delta.copy()
    return AdvResult(
        best_delta,
        best_margin > 0,
        float(np.max(np.abs(best_delta))),
        iters,
        best_margin,
    )


def min_adv_radius(
    net: Network,
    x,
    c: int,
    mask,
    r_lo: float,
    r_hi: float,
    tol: float = 1e-3,
    cfg: PgdConfig = PgdConfig(),
) -> tuple[float, bool]:
    """Bisection for the smallest radius at which the attack succeeds.

    Returns (radius, censored); censored means no success up to r_hi and
    the returned value is that ceiling, not a certified minimum.
    """
    if not r_lo < r_hi:
        raise ValueError("need r_lo < r_hi")
    if not pgd_attack(net, x, c, r_hi, cfg, mask).success:
        return r_hi, True
    lo, hi = r_lo, r_hi
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if pgd_attack(net, x, c, mid, cfg, mask).success:
            hi = mid
        else:
            lo = mid
    return hi, False
