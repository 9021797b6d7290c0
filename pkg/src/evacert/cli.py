"""Command-line front end: explain, verify, benchmark.

Exit codes: 0 success, 2 configuration error, 3 model/data error.
All outputs embed the effective configuration so reruns with identical
flags are byte-for-byte reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .baselines import (
    gradcam,
    gradcampp,
    gradient_input,
    integrated_gradients,
    occlusion,
    rise,
    saliency,
    smoothgrad,
    vargrad,
)
from .bounds import bounds as compute_bounds
from .estimators import (
    AttributionMap,
    ao_upper,
    empirical_map,
    eva_map,
    hybrid_map,
    targeted_map,
    thread_count,
)
from .metrics import MetricReport, deletion_auc, insertion_auc, mu_fidelity, robustness_sr
from .model_io import DataFormatError, ModelFormatError, load_idx, load_model
from .network import Network, as_tensor, forward
from .perturbation import grid_for_shape, linf_ball, lp_ball

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL_DATA = 3

BOUND_CHOICES = ("ibp", "forward", "backward", "ibp+fo", "ibp+fo+ba")
NORM_CHOICES = ("linf", "l1", "l2")

_BASELINES = {
    "saliency": saliency,
    "gradient-input": gradient_input,
    "integrated-gradients": integrated_gradients,
    "smoothgrad": smoothgrad,
    "vargrad": vargrad,
    "gradcam": gradcam,
    "gradcampp": gradcampp,
    "occlusion": occlusion,
    "rise": rise,
}


class ConfigError(ValueError):
    pass


def _blob_path(manifest_path: str) -> str:
    root, _ = os.path.splitext(manifest_path)
    return root + ".bin"


def _load_network(args) -> Network:
    return load_model(args.model, args.weights or _blob_path(args.model))


def _load_image(args, net: Network) -> np.ndarray:
    if args.image:
        if args.image.endswith(".npy"):
            arr = np.load(args.image)
        else:
            from PIL import Image

            arr = np.asarray(Image.open(args.image), dtype=np.float64) / 255.0
            if arr.ndim == 3 and len(net.input_shape) == 3:
                arr = np.moveaxis(arr, -1, 0)
        return as_tensor(arr, net.input_shape)
    if args.data:
        images_path, labels_path = _split_data(args.data)
        data = load_idx(images_path, labels_path)
        if not 0 <= args.index < data.images.shape[0]:
            raise DataFormatError("index-out-of-range", f"dataset holds {data.images.shape[0]} images")
        return _fit_shape(data.images[args.index], net)
    raise ConfigError("provide --image or --data")


def _fit_shape(img, net: Network):
    img = np.asarray(img, dtype=np.float64)
    if img.size != int(np.prod(net.input_shape)):
        raise DataFormatError("shape-mismatch", f"image size {img.size} does not match model input {net.input_shape}")
    return as_tensor(img.reshape(net.input_shape), net.input_shape)


def _split_data(spec: str):
    parts = spec.split(",")
    if len(parts) != 2:
        raise ConfigError("--data expects IMAGES_IDX,LABELS_IDX")
    return parts


def _make_box(x, args):
    if args.norm == "linf":
        return linf_ball(x, args.eps, clip_range=None if args.no_clip else (0.0, 1.0))
    return lp_ball(x, args.eps, {"l1": 1, "l2": 2}[args.norm])


def _class_of(net, x, args) -> int:
    if args.cls is not None:
        return args.cls
    return int(np.argmax(forward(net, x)))


def _config_record(args, extra=None) -> dict:
    record = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    record["version"] = __version__
    record["threads"] = thread_count()
    if extra:
        record.update(extra)
    return record


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_SEQ_STOPS = np.array(
    [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]],
    dtype=np.float64,
)


def _sequential_rgb(vals: np.ndarray) -> np.ndarray:
    t = np.clip(vals, 0.0, 1.0) * (len(_SEQ_STOPS) - 1)
    i = np.minimum(t.astype(int), len(_SEQ_STOPS) - 2)
    f = (t - i)[..., None]
    return ((1 - f) * _SEQ_STOPS[i] + f * _SEQ_STOPS[i + 1]).astype(np.uint8)


def _diverging_rgb(vals: np.ndarray) -> np.ndarray:
    # blue (negative) -> white -> red (positive), symmetric around zero
    t = np.clip(vals, -1.0, 1.0)
    rgb = np.empty(t.shape + (3,), dtype=np.float64)
    neg = t < 0
    rgb[..., 0] = np.where(neg, 255 * (1 + t), 255)
    rgb[..., 1] = 255 * (1 - np.abs(t))
    rgb[..., 2] = np.where(neg, 255, 255 * (1 - t))
    return rgb.astype(np.uint8)


def render_heatmap(scores: np.ndarray, path: str, signed: bool, scale: int = 16):
    """Write a per-cell heatmap PNG with a deterministic colormap."""
    from PIL import Image

    grid = np.asarray(scores, dtype=np.float64)
    if signed:
        span = max(float(np.max(np.abs(grid))), 1e-12)
        rgb = _diverging_rgb(grid / span)
    else:
        lo, hi = float(grid.min()), float(grid.max())
        rgb = _sequential_rgb((grid - lo) / max(hi - lo, 1e-12))
    rgb = np.kron(rgb, np.ones((scale, scale, 1), dtype=np.uint8))
    Image.fromarray(rgb, "RGB").save(path)


def _write_cell_csv(amap: AttributionMap, path: str):
    g = amap.grid
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "row", "col", "score"])
        for i, score in enumerate(np.asarray(amap.scores).ravel()):
            writer.writerow([i, i // g.side, i % g.side, repr(float(score))])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _explain_map(net, x, args) -> AttributionMap:
    c = _class_of(net, x, args)
    grid = grid_for_shape(net.input_shape, args.grid)
    box = _make_box(x, args)
    if args.method == "eva":
        return eva_map(net, x, grid, box, args.bound, c)
    if args.method == "eva-emp":
        return empirical_map(net, x, grid, box, args.samples, args.seed, c)
    if args.method == "eva-hybrid":
        if args.split is None:
            raise ConfigError("--method eva-hybrid requires --split")
        return hybrid_map(net, args.split, x, grid, box, args.samples, args.seed, args.bound, c)
    if args.method == "targeted":
        if args.target is None:
            raise ConfigError("--method targeted requires --target")
        return targeted_map(net, x, grid, box, args.bound, c, args.target)
    if args.method.startswith("baseline:"):
        name = args.method.split(":", 1)[1]
        if name not in _BASELINES:
            raise ConfigError(f"unknown baseline {name!r}; choose from {sorted(_BASELINES)}")
        pixel = _baseline_scores(name, net, x, c, args)
        cell = np.array([pixel.ravel()[idx].sum() for idx in grid.cells])
        return AttributionMap(cell, grid, {"variant": f"baseline:{name}"}, c)
    raise ConfigError(f"unknown method {args.method!r}")


def _baseline_scores(name, net, x, c, args) -> np.ndarray:
    fn = _BASELINES[name]
    if name in ("smoothgrad", "vargrad"):
        sigma = 0.2 * 1.0  # 0.2 x input value range [0, 1]
        return fn(net, x, c, sigma=sigma, seed=args.seed)
    if name == "rise":
        return fn(net, x, c, seed=args.seed)
    return fn(net, x, c)


def cmd_explain(args) -> int:
    net = _load_network(args)
    x = _load_image(args, net)
    amap = _explain_map(net, x, args)
    os.makedirs(args.out, exist_ok=True)
    signed = amap.target_class is not None
    grid_scores = np.asarray(amap.scores).reshape(amap.grid.side, amap.grid.side)
    render_heatmap(grid_scores, os.path.join(args.out, "heatmap.png"), signed)
    _write_cell_csv(amap, os.path.join(args.out, "cells.csv"))
    meta = _config_record(
        args,
        {
            "class_of_interest": amap.class_of_interest,
            "target_class": amap.target_class,
            "descriptor": amap.descriptor,
        },
    )
    with open(os.path.join(args.out, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"wrote heatmap.png, cells.csv, metadata.json to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    net = _load_network(args)
    x = _load_image(args, net)
    c = _class_of(net, x, args)
    box = _make_box(x, args)
    out = compute_bounds(net, box, args.bound)
    score = ao_upper(net, x, box, args.bound, c)
    print(f"class of interest: {c}")
    print(f"bound method: {args.bound}  eps: {args.eps}  norm: {args.norm}")
    for i in range(net.class_count):
        print(f"  logit {i}: [{out.lower[i]:.6f}, {out.upper[i]:.6f}]")
    print(f"certified adversarial overlap: {score.value:.6f} (vs class {score.adversary_class})")
    if score.value <= 0:
        print("CERTIFIED: no adversarial perturbation exists in this region")
    else:
        print("not certified at this radius")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        payload = _config_record(
            args,
            {
                "lower": out.lower.tolist(),
                "upper": out.upper.tolist(),
                "overlap": score.value,
                "certified_robust": bool(score.value <= 0),
                "class_of_interest": c,
            },
        )
        with open(os.path.join(args.out, "verify.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    methods = [m for m in args.methods.split(",") if m]
    if not methods:
        raise ConfigError("--methods must name at least one method")
    net = _load_network(args)
    images_path, labels_path = _split_data(args.data)
    data = load_idx(images_path, labels_path)
    count = min(args.count, data.images.shape[0])
    report = MetricReport(provenance=_config_record(args, {"methods": methods}))
    for mi, method in enumerate(methods):
        run_args = argparse.Namespace(**vars(args))
        run_args.method = method
        for i in range(count):
            x = _fit_shape(data.images[i], net)
            t0 = time.perf_counter()
            amap = _explain_map(net, x, run_args)
            elapsed = time.perf_counter() - t0
            c = amap.class_of_interest
            values = {
                "deletion": deletion_auc(net, x, amap, seed=args.seed, c=c),
                "insertion": insertion_auc(net, x, amap, seed=args.seed, c=c),
                "time": elapsed,
            }
            if args.full_metrics:
                values["mu_fidelity"] = mu_fidelity(net, x, amap, seed=args.seed, c=c)
                values["robustness_sr"] = robustness_sr(net, x, amap, c=c)
            report.add(i, method, values)
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "per_image.csv"))
    report.to_json(os.path.join(args.out, "report.json"))
    print(f"benchmarked {len(methods)} method(s) on {count} image(s); reports in {args.out}")
    for method, agg in report.aggregates().items():
        cells = "  ".join(f"{k}={v:.4f}" for k, v in agg.items())
        print(f"  {method}: {cells}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--model", required=True, help="path to the model manifest JSON")
    p.add_argument("--weights", help="parameter blob path (default: manifest with .bin)")
    p.add_argument("--data", help="dataset as IMAGES_IDX,LABELS_IDX")
    p.add_argument("--image", help="single input (.npy or image file)")
    p.add_argument("--index", type=int, default=0, help="image index within --data")
    p.add_argument("--bound", choices=BOUND_CHOICES, default="ibp+fo+ba")
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--norm", choices=NORM_CHOICES, default="linf")
    p.add_argument("--grid", type=int, default=12)
    p.add_argument("--class", dest="cls", type=int, help="class of interest (default: prediction)")
    p.add_argument("--target", type=int, help="target class for --method targeted")
    p.add_argument("--split", type=int, help="intermediate layer index for --method eva-hybrid")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-clip", action="store_true", help="skip clipping the region to [0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evacert",
        description="Certified attribution maps via verified perturbation analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="compute an attribution map and render outputs")
    _add_common(p)
    p.add_argument(
        "--method",
        default="eva",
        help="eva | eva-emp | eva-hybrid | targeted | baseline:<name>",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("verify", help="print logit bounds and the robustness certificate")
    _add_common(p)
    p.add_argument("--out", help="optional directory for verify.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("benchmark", help="evaluate methods on a dataset slice")
    _add_common(p)
    p.add_argument("--methods", required=True, help="comma-separated method list")
    p.add_argument("--count", type=int, default=5, help="number of images from the slice")
    p.add_argument(
        "--full-metrics",
        action="store_true",
        help="also compute the subset-correlation and attack-radius metrics (slow)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelFormatError, DataFormatError, FileNotFoundError, OSError) as exc:
        print(f"model/data error: {exc}", file=sys.stderr)
        return EXIT_MODEL_DATA
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
