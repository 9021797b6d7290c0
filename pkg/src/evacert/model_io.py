"""Model and dataset I/O plus a minimal fixture trainer.

Model format: a JSON manifest (format_version 1, layer descriptors with
blob offsets) next to a raw little-endian float64 parameter blob, so
round trips are bit-exact. Datasets use the de-facto IDX layout
(big-endian magic + dims, unsigned bytes scaled into [0, 1]).

The trainer is plain SGD with cross-entropy on dense ReLU stacks; it
exists to produce reproducible test fixtures, not competitive models.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .network import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    ReLU,
    Softmax,
    forward_batch,
    stable_softmax,
)

__all__ = [
    "ModelFormatError",
    "DataFormatError",
    "TrainingDiverged",
    "DatasetSlice",
    "save_model",
    "load_model",
    "load_idx",
    "save_idx",
    "train_fixture",
    "mnist_mlp_config",
    "cifar_cnn_config",
]

FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ModelFormatError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class DataFormatError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetSlice:
    images: np.ndarray  # (n, ...) in [0, 1]
    labels: np.ndarray  # (n,) ints

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError("count-mismatch", "image/label counts differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel-range", "pixels must lie in [0, 1]")


# ---------------------------------------------------------------------------
# model manifest + blob
# ---------------------------------------------------------------------------


def _layer_params(layer):
    if isinstance(layer, Dense):
        return [("weights", layer.weights), ("bias", layer.bias)]
    if isinstance(layer, Conv2D):
        return [("kernels", layer.kernels), ("bias", layer.bias)]
    return []


def _describe_layer(layer, offset: int):
    desc: dict = {"kind": type(layer).__name__}
    params = []
    for name, arr in _layer_params(layer):
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    if params:
        desc["params"] = params
    if isinstance(layer, Conv2D):
        desc["stride"] = layer.stride
        desc["padding"] = layer.padding
    if isinstance(layer, MaxPool2D):
        desc["window"] = list(layer.window)
        desc["stride"] = list(layer.stride)
    return desc, offset


def save_model(net: Network, manifest_path, blob_path, overwrite: bool = False):
    """Write manifest + parameter blob; refuses to clobber without the flag."""
    for path in (manifest_path, blob_path):
        if not overwrite and os.path.exists(path):
            raise FileExistsError(f"{path} exists; pass overwrite=True to replace")
    offset = 0
    descs = []
    chunks = []
    for layer in net.layers:
        desc, offset = _describe_layer(layer, offset)
        descs.append(desc)
        for _, arr in _layer_params(layer):
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "split_index": net.split_index,
        "layers": descs,
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))


def _take(blob: np.ndarray, entry) -> np.ndarray:
    start = entry["offset"]
    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
    if start + count > blob.size:
        raise ModelFormatError("truncated-blob", f"parameter {entry['name']} exceeds blob")
    return blob[start : start + count].reshape(entry["shape"])


def load_model(manifest_path, blob_path) -> Network:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            "version-mismatch", f"expected format_version {FORMAT_VERSION}"
        )
    blob = np.frombuffer(open(blob_path, "rb").read(), dtype="<f8").astype(np.float64)
    seen: list[tuple[int, int]] = []
    layers = []
    for desc in manifest["layers"]:
        kind = desc["kind"]
        params = {p["name"]: p for p in desc.get("params", [])}
        for p in params.values():
            count = int(np.prod(p["shape"]))
            for s, e in seen:
                if p["offset"] < e and p["offset"] + count > s:
                    raise ModelFormatError("overlapping-offsets", "parameter blobs overlap")
            seen.append((p["offset"], p["offset"] + count))
        try:
            if kind == "Dense":
                layers.append(Dense(_take(blob, params["weights"]), _take(blob, params["bias"])))
            elif kind == "Conv2D":
                layers.append(
                    Conv2D(
                        _take(blob, params["kernels"]),
                        _take(blob, params["bias"]),
                        stride=desc.get("stride", 1),
                        padding=desc.get("padding", "valid"),
                    )
                )
            elif kind == "ReLU":
                layers.append(ReLU())
            elif kind == "MaxPool2D":
                layers.append(MaxPool2D(tuple(desc["window"]), tuple(desc["stride"])))
            elif kind == "Flatten":
                layers.append(Flatten())
            elif kind == "Softmax":
                layers.append(Softmax())
            else:
                raise ModelFormatError("unknown-layer", f"layer kind {kind!r}")
        except KeyError as exc:
            raise ModelFormatError("shape-inconsistent", f"missing parameter {exc}") from exc
    try:
        return Network(
            tuple(layers),
            tuple(manifest["input_shape"]),
            manifest["class_count"],
            manifest.get("split_index"),
        )
    except ValueError as exc:
        raise ModelFormatError("shape-inconsistent", str(exc)) from exc


# ---------------------------------------------------------------------------
# IDX datasets
# ---------------------------------------------------------------------------


def load_idx(images_path, labels_path) -> DatasetSlice:
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError("bad-magic", f"images magic {magic:#010x}")
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    if raw.size != n * rows * cols:
        raise DataFormatError("truncated-file", "image payload shorter than header claims")
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError("bad-magic", f"labels magic {magic:#010x}")
        labels = np.frombuffer(fh.read(), dtype=np.uint8)
    if n != n_labels or labels.size != n_labels:
        raise DataFormatError("count-mismatch", "image and label counts differ")
    images = raw.reshape(n, rows, cols).astype(np.float64) / 255.0
    return DatasetSlice(images, labels.astype(np.int64))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write [0, 1] images and integer labels in IDX byte format."""
    images = np.asarray(images)
    n, rows, cols = images.shape
    data = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(data.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# fixture architectures + trainer
# ---------------------------------------------------------------------------


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def mnist_mlp_config(seed: int = 0, input_size: int = 784, split_index: int | None = None) -> Network:
    """Dense stack with (256, 128, 64, 32, 10) output widths."""
    rng = np.random.default_rng(seed)
    widths = [input_size, 256, 128, 64, 32, 10]
    layers: list = []
    for i in range(len(widths) - 1):
        layers.append(Dense(_glorot(rng, widths[i + 1], widths[i]), np.zeros(widths[i + 1])))
        if i < len(widths) - 2:
            layers.append(ReLU())
    return Network(tuple(layers), (input_size,), 10, split_index)


def cifar_cnn_config(seed: int = 0) -> Network:
    """Conv stack with (128, 80, 64) filters, 2x2 pooling, dense head."""
    rng = np.random.default_rng(seed)
    specs = [(128, 3), (80, 128), (64, 80)]
    layers: list = []
    for out_c, in_c in specs:
        k = rng.normal(0.0, np.sqrt(2.0 / (in_c * 9)), (out_c, in_c, 3, 3))
        layers.append(Conv2D(k, np.zeros(out_c), stride=1, padding="valid"))
        layers.append(ReLU())
    layers.append(MaxPool2D((2, 2)))
    layers.append(Flatten())
    flat = 64 * 13 * 13
    layers.append(Dense(_glorot(rng, 64, flat), np.zeros(64)))
    layers.append(ReLU())
    layers.append(Dense(_glorot(rng, 10, 64), np.zeros(10)))
    return Network(tuple(layers), (3, 32, 32), 10)


def _accuracy(net: Network, images, labels) -> float:
    logits = forward_batch(net, images)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_fixture(
    net: Network,
    data: DatasetSlice,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    erase_grid=None,
    erase_frac: float = 0.0,
) -> tuple[Network, float]:
    """SGD + cross-entropy on dense ReLU stacks; deterministic per seed.

    `weight_decay` adds an L2 penalty gradient; `erase_grid`/`erase_frac`
    enable random-erasing augmentation: per sample, a random subset of the
    grid's cells (up to `erase_frac` of them) is replaced with uniform
    noise. Both produce smoother networks with tighter certified bounds
    than plain SGD. Returns (trained network, final training accuracy).
    Raises TrainingDiverged when the loss turns non-finite.
    """
    if data.images.shape[0] == 0:
        raise ValueError("training data is empty")
    if not all(isinstance(l, (Dense, ReLU, Flatten, Softmax)) for l in net.layers):
        raise TypeError("fixture trainer supports dense ReLU stacks only")
    if erase_frac and erase_grid is None:
        raise ValueError("erase_frac requires erase_grid")
    rng = np.random.default_rng(seed)
    weights = [l.weights.copy() for l in net.layers if isinstance(l, Dense)]
    biases = [l.bias.copy() for l in net.layers if isinstance(l, Dense)]
    xs = data.images.reshape(data.images.shape[0], -1)
    ys = data.labels
    n = xs.shape[0]
    # divergence is detected via the finiteness checkpoint each batch;
    # silence the transient overflow warnings on the way there
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                xb, yb = xs[idx], ys[idx]
                if erase_frac:
                    cells = erase_grid.cells
                    xb = xb.copy()
                    k_max = int(erase_frac * len(cells)) + 1
                    for bi in range(len(xb)):
                        k = rng.integers(0, k_max)
                        for cc in rng.choice(len(cells), size=k, replace=False):
                            xb[bi, cells[cc]] = rng.random(cells[cc].size)
                # forward, caching dense inputs
                acts = [xb]
                z = xb
                for w, b in zip(weights, biases):
                    z = z @ w.T + b
                    acts.append(z)
                    z = np.maximum(z, 0.0)
                logits = acts[-1]
                if not np.all(np.isfinite(logits)):
                    raise TrainingDiverged("activations became non-finite")
                probs = stable_softmax(logits)
                loss = -np.mean(np.log(probs[np.arange(len(yb)), yb] + 1e-300))
                if not np.isfinite(loss):
                    raise TrainingDiverged("loss became non-finite")
                g = probs
                g[np.arange(len(yb)), yb] -= 1.0
                g /= len(yb)
                for li in range(len(weights) - 1, -1, -1):
                    a_in = acts[li] if li == 0 else np.maximum(acts[li], 0.0)
                    gw = g.T @ a_in
                    gb = g.sum(axis=0)
                    if li > 0:
                        g = (g @ weights[li]) * (acts[li] > 0)
                    weights[li] -= lr * (gw + weight_decay * weights[li])
                    biases[li] -= lr * gb
    layers = []
    di = 0
    for l in net.layers:
        if isinstance(l, Dense):
            layers.append(Dense(weights[di], biases[di]))
            di += 1
        else:
            layers.append(l)
    trained = Network(tuple(layers), net.input_shape, net.class_count, net.split_index)
    return trained, _accuracy(trained, data.images, data.labels)
