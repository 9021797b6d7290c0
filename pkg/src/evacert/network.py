"""Dense-tensor feedforward networks with manual reverse-mode gradients.

Layer vocabulary: Dense, Conv2D, ReLU, MaxPool2D, Flatten, Softmax.
All arrays are 64-bit floats; images use (channels, height, width)
layout. Networks are immutable after construction and every operation
here is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "Dense",
    "Conv2D",
    "ReLU",
    "MaxPool2D",
    "Flatten",
    "Softmax",
    "Network",
    "ShapeError",
    "as_tensor",
    "layer_output_shape",
    "forward",
    "forward_batch",
    "forward_probs",
    "gradient",
    "input_gradient",
    "activation_at",
    "feature_maps_and_grads",
    "stable_softmax",
]


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose."""


def as_tensor(x, shape=None) -> np.ndarray:
    """Validate and convert to a finite float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = as_tensor(self.weights)
        b = as_tensor(self.bias)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ShapeError("Dense weights/bias shapes inconsistent")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class Conv2D:
    kernels: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        k = as_tensor(self.kernels)
        b = as_tensor(self.bias)
        if k.ndim != 4 or b.ndim != 1 or k.shape[0] != b.shape[0]:
            raise ShapeError("Conv2D kernels/bias shapes inconsistent")
        if self.padding not in ("valid", "same"):
            raise ValueError("Conv2D padding must be 'valid' or 'same'")
        if self.stride < 1:
            raise ValueError("Conv2D stride must be positive")
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class ReLU:
    pass


@dataclass(frozen=True, eq=False)
class MaxPool2D:
    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] | None = None  # defaults to window

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", tuple(self.window))


@dataclass(frozen=True, eq=False)
class Flatten:
    pass


@dataclass(frozen=True, eq=False)
class Softmax:
    pass


Layer = Dense | Conv2D | ReLU | MaxPool2D | Flatten | Softmax


def layer_output_shape(layer: Layer, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if len(in_shape) != 1 or in_shape[0] != layer.weights.shape[1]:
            raise ShapeError(
                f"Dense expects ({layer.weights.shape[1]},), got {in_shape}"
            )
        return (layer.weights.shape[0],)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 3 or in_shape[0] != layer.kernels.shape[1]:
            raise ShapeError(f"Conv2D input shape {in_shape} inconsistent with kernels")
        c_out, _, kh, kw = layer.kernels.shape
        _, h, w = in_shape
        pt, pb = kernels.conv_padding(h, kh, layer.stride, layer.padding)
        pl, pr = kernels.conv_padding(w, kw, layer.stride, layer.padding)
        oh = kernels.conv_out_size(h, kh, layer.stride, pt + pb)
        ow = kernels.conv_out_size(w, kw, layer.stride, pl + pr)
        if oh < 1 or ow < 1:
            raise ShapeError("Conv2D output collapses to empty")
        return (c_out, oh, ow)
    if isinstance(layer, MaxPool2D):
        if len(in_shape) != 3:
            raise ShapeError("MaxPool2D expects (c, h, w) input")
        c, h, w = in_shape
        wh, ww = layer.window
        sh, sw = layer.stride
        oh = (h - wh) // sh + 1
        ow = (w - ww) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError("MaxPool2D window larger than input")
        return (c, oh, ow)
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(layer, (ReLU, Softmax)):
        return tuple(in_shape)
    raise TypeError(f"unknown layer kind: {layer!r}")


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    class_count: int
    split_index: int | None = None
    _shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise ShapeError("Softmax may only appear as the final layer")
            shapes.append(layer_output_shape(layer, shapes[-1]))
        if shapes[-1] != (self.class_count,):
            raise ShapeError(
                f"network output shape {shapes[-1]} != class count ({self.class_count},)"
            )
        if self.split_index is not None and not 0 < self.split_index < len(self.layers):
            raise ShapeError("split_index must lie strictly inside the layer list")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def logit_layers(self) -> tuple[Layer, ...]:
        """Layers with a trailing Softmax, if any, removed."""
        if self.layers and isinstance(self.layers[-1], Softmax):
            return self.layers[:-1]
        return self.layers

    def shape_after(self, index: int) -> tuple[int, ...]:
        return self._shapes[index]


def _conv_geometry(layer: Conv2D, in_shape):
    _, h, w = in_shape
    _, _, kh, kw = layer.kernels.shape
    pt, pb = kernels.conv_padding(h, kh, layer.stride, layer.padding)
    pl, pr = kernels.conv_padding(w, kw, layer.stride, layer.padding)
    oh = kernels.conv_out_size(h, kh, layer.stride, pt + pb)
    ow = kernels.conv_out_size(w, kw, layer.stride, pl + pr)
    return kh, kw, pt, pl, oh, ow


def _apply_layer(layer: Layer, x: np.ndarray):
    """Returns (output, aux) where aux is whatever backward needs."""
    if isinstance(layer, Dense):
        return layer.weights @ x + layer.bias, None
    if isinstance(layer, Conv2D):
        kh, kw, pt, pl, oh, ow = _conv_geometry(layer, x.shape)
        cols = kernels.im2col(x, kh, kw, layer.stride, layer.stride, pt, pl, oh, ow)
        kmat = layer.kernels.reshape(layer.kernels.shape[0], -1)
        out = cols @ kmat.T + layer.bias
        return out.T.reshape(layer.kernels.shape[0], oh, ow), None
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), None
    if isinstance(layer, MaxPool2D):
        out, arg = kernels.maxpool_forward(
            x, layer.window[0], layer.window[1], layer.stride[0], layer.stride[1]
        )
        return out, arg
    if isinstance(layer, Flatten):
        return x.ravel(), None
    raise TypeError(f"cannot apply layer {layer!r}")


def _forward_trace(net: Network, x: np.ndarray, upto: int | None = None):
    """Run the layer prefix [0, upto), caching inputs and aux per layer."""
    x = as_tensor(x, net.input_shape)
    layers = net.logit_layers if upto is None else net.layers[:upto]
    inputs, auxes = [], []
    for layer in layers:
        inputs.append(x)
        x, aux = _apply_layer(layer, x)
        auxes.append(aux)
    return x, inputs, auxes


def _backprop_layer(layer: Layer, g: np.ndarray, inp: np.ndarray, aux):
    if isinstance(layer, Dense):
        return layer.weights.T @ g
    if isinstance(layer, Conv2D):
        kh, kw, pt, pl, oh, ow = _conv_geometry(layer, inp.shape)
        c_out = layer.kernels.shape[0]
        kmat = layer.kernels.reshape(c_out, -1)
        dcols = g.reshape(c_out, oh * ow).T @ kmat
        c, h, w = inp.shape
        return kernels.col2im_add(
            dcols, c, h, w, kh, kw, layer.stride, layer.stride, pt, pl, oh, ow
        )
    if isinstance(layer, ReLU):
        # subgradient 0 at exactly 0
        return g * (inp > 0)
    if isinstance(layer, MaxPool2D):
        c, h, w = inp.shape
        return kernels.maxpool_backward(np.ascontiguousarray(g), aux, c, h, w)
    if isinstance(layer, Flatten):
        return g.reshape(inp.shape)
    raise TypeError(f"cannot backprop layer {layer!r}")


def forward(net: Network, x) -> np.ndarray:
    """Pre-softmax logits for a single input."""
    out, _, _ = _forward_trace(net, x)
    return out


def forward_batch(net: Network, xs: np.ndarray) -> np.ndarray:
    """Logits for a batch stacked on the leading axis."""
    xs = np.asarray(xs, dtype=np.float64)
    if isinstance(net.logit_layers, tuple) and all(
        isinstance(l, (Dense, ReLU, Flatten)) for l in net.logit_layers
    ):
        z = xs.reshape(xs.shape[0], -1)
        for layer in net.logit_layers:
            if isinstance(layer, Dense):
                z = z @ layer.weights.T + layer.bias
            elif isinstance(layer, ReLU):
                z = np.maximum(z, 0.0)
        return z
    return np.stack([forward(net, x) for x in xs])


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward_probs(net: Network, x) -> np.ndarray:
    return stable_softmax(forward(net, x))


def input_gradient(net: Network, x, seed: np.ndarray) -> np.ndarray:
    """Reverse-mode product: gradient of seed . logits w.r.t. the input."""
    _, inputs, auxes = _forward_trace(net, x)
    g = as_tensor(seed, (net.class_count,))
    for layer, inp, aux in zip(reversed(net.logit_layers), reversed(inputs), reversed(auxes)):
        g = _backprop_layer(layer, g, inp, aux)
    return g


def gradient(net: Network, x, class_index: int, wrt_probs: bool = False) -> np.ndarray:
    """Gradient of one class score (logit or softmax probability) w.r.t. x."""
    if not 0 <= class_index < net.class_count:
        raise IndexError(f"class index {class_index} out of range")
    seed = np.zeros(net.class_count)
    if wrt_probs:
        p = forward_probs(net, x)
        seed = p[class_index] * (np.eye(net.class_count)[class_index] - p)
    else:
        seed[class_index] = 1.0
    return input_gradient(net, x, seed)


def activation_at(net: Network, x, split_index: int) -> np.ndarray:
    """Output of the layer prefix [0, split_index)."""
    if not 0 <= split_index <= len(net.layers):
        raise IndexError(f"split index {split_index} out of range")
    out, _, _ = _forward_trace(net, x, upto=split_index)
    return out


def feature_maps_and_grads(net: Network, x, class_index: int, conv_layer_index: int):
    """Feature maps of one conv layer and the class-logit gradient w.r.t. them."""
    if not 0 <= conv_layer_index < len(net.layers) or not isinstance(
        net.layers[conv_layer_index], Conv2D
    ):
        raise TypeError(f"layer {conv_layer_index} is not a Conv2D layer")
    if not 0 <= class_index < net.class_count:
        raise IndexError(f"class index {class_index} out of range")
    _, inputs, auxes = _forward_trace(net, x)
    maps = inputs[conv_layer_index + 1] if conv_layer_index + 1 < len(inputs) else None
    if maps is None:  # conv is the last logit layer
        maps, _ = _apply_layer(net.layers[conv_layer_index], inputs[conv_layer_index])
    g = np.zeros(net.class_count)
    g[class_index] = 1.0
    tail = list(
        zip(net.logit_layers, inputs, auxes)
    )[conv_layer_index + 1 :]
    for layer, inp, aux in reversed(tail):
        g = _backprop_layer(layer, g, inp, aux)
    return maps, g
