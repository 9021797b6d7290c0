"""Fidelity and robustness evaluation of attribution maps.

Deletion/Insertion/muFidelity score the post-softmax probability of the
class of interest with a fresh uniform-noise baseline; the robustness
metric drives the projected-gradient attack restricted to top-ranked
variables. Maps are evaluated at unit granularity: a unit is a grid cell
when the map carries one, otherwise a single coordinate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import PgdConfig, min_adv_radius
from .bounds import BoundMethod, backward_bounds, ibp_bounds
from .estimators import AttributionMap, ao_upper
from .network import Network, as_tensor, forward, forward_probs
from .perturbation import PerturbBox, mask_ball

__all__ = [
    "MetricReport",
    "attribution_units",
    "deletion_auc",
    "insertion_auc",
    "mu_fidelity",
    "mu_fidelity_full",
    "robustness_curve",
    "robustness_sr",
    "tightness",
    "stability_check",
]


def attribution_units(attr, grid=None):
    """Normalize an attribution into (per-unit scores, unit index arrays)."""
    if isinstance(attr, AttributionMap):
        return np.asarray(attr.scores, dtype=np.float64).ravel(), list(attr.grid.cells)
    scores = np.asarray(attr, dtype=np.float64).ravel()
    if grid is not None:
        return np.array([scores[idx].sum() for idx in grid.cells]), list(grid.cells)
    return scores, [np.array([i]) for i in range(scores.size)]


def _ranked_units(scores, units):
    order = np.argsort(-scores, kind="stable")  # ties by unit index
    return [units[i] for i in order]


def _default_class(net, x, c):
    return int(np.argmax(forward(net, x))) if c is None else c


def _curve_auc(fracs, values):
    return float(np.trapezoid(values, fracs))


def deletion_auc(net: Network, x, attr, steps=None, seed: int = 0, c=None, grid=None) -> float:
    """Probability AUC as top-ranked units are replaced with uniform noise."""
    x = as_tensor(x, net.input_shape)
    c = _default_class(net, x, c)
    scores, units = attribution_units(attr, grid)
    ranked = _ranked_units(scores, units)
    steps = len(ranked) if steps is None else steps
    rng = np.random.default_rng(seed)
    ks = np.unique(np.round(np.linspace(0, len(ranked), steps + 1)).astype(int))
    fracs, values = [], []
    flat = x.ravel()
    for k in ks:
        pert = flat.copy()
        idx = np.concatenate(ranked[:k]) if k else np.empty(0, np.int64)
        pert[idx] = rng.random(idx.size)
        values.append(forward_probs(net, pert.reshape(net.input_shape))[c])
        fracs.append(k / len(ranked))
    return _curve_auc(fracs, values)


def insertion_auc(net: Network, x, attr, steps=None, seed: int = 0, c=None, grid=None) -> float:
    """Inverse of deletion: start from noise, restore top-ranked units."""
    x = as_tensor(x, net.input_shape)
    c = _default_class(net, x, c)
    scores, units = attribution_units(attr, grid)
    ranked = _ranked_units(scores, units)
    steps = len(ranked) if steps is None else steps
    rng = np.random.default_rng(seed)
    ks = np.unique(np.round(np.linspace(0, len(ranked), steps + 1)).astype(int))
    fracs, values = [], []
    flat = x.ravel()
    for k in ks:
        idx = np.concatenate(ranked[:k]) if k else np.empty(0, np.int64)
        pert = rng.random(flat.size)
        pert[idx] = flat[idx]
        values.append(forward_probs(net, pert.reshape(net.input_shape))[c])
        fracs.append(k / len(ranked))
    return _curve_auc(fracs, values)


def mu_fidelity_full(
    net: Network,
    x,
    attr,
    subset_fraction: float = 0.2,
    n_subsets: int = 200,
    seed: int = 0,
    c=None,
    grid=None,
) -> tuple[float, bool]:
    """Correlation between summed attribution of random subsets and the
    probability drop when those subsets are baselined.

    Returns (correlation, degenerate); degenerate means one side had no
    variance and the correlation is reported as 0.
    """
    if n_subsets < 2:
        raise ValueError("need at least two subsets")
    x = as_tensor(x, net.input_shape)
    c = _default_class(net, x, c)
    scores, units = attribution_units(attr, grid)
    k = max(1, int(round(subset_fraction * len(units))))
    rng = np.random.default_rng(seed)
    base = forward_probs(net, x)[c]
    flat = x.ravel()
    sums, drops = [], []
    for _ in range(n_subsets):
        chosen = rng.choice(len(units), size=k, replace=False)
        idx = np.concatenate([units[i] for i in chosen])
        pert = flat.copy()
        pert[idx] = rng.random(idx.size)
        drops.append(base - forward_probs(net, pert.reshape(net.input_shape))[c])
        sums.append(scores[chosen].sum())
    sums = np.array(sums)
    drops = np.array(drops)
    if sums.std() < 1e-12 or drops.std() < 1e-12:
        return 0.0, True
    return float(np.corrcoef(sums, drops)[0, 1]), False


def mu_fidelity(net, x, attr, subset_fraction=0.2, n_subsets=200, seed=0, c=None, grid=None) -> float:
    return mu_fidelity_full(net, x, attr, subset_fraction, n_subsets, seed, c, grid)[0]


def robustness_curve(
    net: Network,
    x,
    attr,
    k_fracs=tuple(np.arange(1, 11) / 10),
    cfg: PgdConfig = PgdConfig(),
    r_hi: float = 1.0,
    tol: float = 1e-3,
    c=None,
    grid=None,
):
    """Minimal adversarial radius restricted to the top-k units, per k."""
    x = as_tensor(x, net.input_shape)
    c = _default_class(net, x, c)
    scores, units = attribution_units(attr, grid)
    ranked = _ranked_units(scores, units)
    points = []
    for frac in k_fracs:
        k = max(1, int(round(frac * len(ranked))))
        mask = np.concatenate(ranked[:k])
        eps, censored = min_adv_radius(net, x, c, mask, 0.0, r_hi, tol, cfg)
        points.append((float(frac), float(eps), censored))
    return points


def robustness_sr(net, x, attr, k_fracs=tuple(np.arange(1, 11) / 10), cfg=PgdConfig(), r_hi=1.0, tol=1e-3, c=None, grid=None) -> float:
    points = robustness_curve(net, x, attr, k_fracs, cfg, r_hi, tol, c, grid)
    fracs = [p[0] for p in points]
    vals = [p[1] for p in points]
    return _curve_auc(fracs, vals)


def tightness(net: Network, images, box_builder, method: BoundMethod) -> float:
    """Mean certified adversarial overlap over a dataset slice."""
    vals = []
    for x in images:
        c = int(np.argmax(forward(net, x)))
        vals.append(ao_upper(net, x, box_builder(x), method, c).value)
    return float(np.mean(vals))


def _eva_dual(net: Network, x, u, box: PerturbBox, c: int) -> float:
    """EVA with dual-norm (exact-on-linear) backward concretization."""
    def ao(b):
        _, trace = ibp_bounds(net, b)
        out = backward_bounds(net, b, trace, p=b.norm)
        vals = out.upper.copy()
        vals[c] = -np.inf
        return float(np.max(vals) - out.lower[c])

    return ao(box) - ao(mask_ball(box, u))


def stability_check(
    net: Network,
    x,
    u,
    box: PerturbBox,
    r: float,
    n_pairs: int,
    lipschitz: float,
    seed: int = 0,
):
    """Empirical check of the stability bound 4 L (eps + r).

    Samples nearby inputs within L2 radius r, recomputes the importance
    score with the ball recentered, and compares the largest deviation to
    the bound. Returns (max deviation, bound, passed).
    """
    x = as_tensor(x, net.input_shape)
    c = int(np.argmax(forward(net, x)))
    eps = box.radius if box.radius is not None else float(np.max(box.hi))
    base = _eva_dual(net, x, u, replace(box, center=x), c)
    rng = np.random.default_rng(seed)
    max_dev = 0.0
    d = x.size
    for _ in range(n_pairs):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        z = x.ravel() + direction * r * rng.random() ** (1.0 / d)
        z = z.reshape(x.shape)
        val = _eva_dual(net, z, u, replace(box, center=z), c)
        max_dev = max(max_dev, abs(val - base))
    bound = 4.0 * lipschitz * (eps + r)
    return max_dev, bound, max_dev <= bound + 1e-9


@dataclass
class MetricReport:
    """Per-image metric values plus dataset aggregates and provenance."""

    columns = ("deletion", "insertion", "mu_fidelity", "robustness_sr")

    per_image: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, image_index: int, method: str, values: dict):
        row = {"image": image_index, "method": method}
        row.update(values)
        self.per_image.append(row)

    def aggregates(self) -> dict:
        out: dict = {}
        methods = sorted({r["method"] for r in self.per_image})
        for m in methods:
            rows = [r for r in self.per_image if r["method"] == m]
            out[m] = {
                col: float(np.mean([r[col] for r in rows if col in r]))
                for col in self.columns
                if any(col in r for r in rows)
            }
            if any("time" in r for r in rows):
                out[m]["time"] = float(np.sum([r.get("time", 0.0) for r in rows]))
        return out

    def to_json(self, path):
        payload = {
            "provenance": self.provenance,
            "aggregates": self.aggregates(),
            "per_image": self.per_image,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def to_csv(self, path):
        cols = ["image", "method", *self.columns, "time"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.per_image:
                writer.writerow([row.get(col, "") for col in cols])
