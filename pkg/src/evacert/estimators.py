"""Certified adversarial-overlap scoring and the attribution estimators
built on it: the verified drop-in-overlap score per frozen region, its
sampled (empirical) counterpart, the hybrid intermediate-layer variant,
and signed targeted maps.

All scores live in logit space; softmax never enters bound propagation.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bounds import BoundMethod, bounds, bounds_from_activation, output_bounds_many, _batch_of, _BoxBatch
from .network import Network, activation_at, as_tensor, forward, forward_batch
from .perturbation import CellGrid, PerturbBox, mask_ball, sample_uniform, sign_split

__all__ = [
    "OverlapScore",
    "AttributionMap",
    "ao_upper",
    "ao_targeted_upper",
    "ao_empirical",
    "eva_score",
    "eva_empirical",
    "eva_map",
    "empirical_map",
    "hybrid_activation_box",
    "eva_hybrid",
    "hybrid_map",
    "targeted_map",
]


@dataclass(frozen=True)
class OverlapScore:
    value: float
    certified: bool
    class_of_interest: int
    adversary_class: int


@dataclass(frozen=True, eq=False)
class AttributionMap:
    scores: np.ndarray  # one score per cell, row-major cells
    grid: CellGrid
    descriptor: dict
    class_of_interest: int
    target_class: int | None = None

    def pixel_scores(self) -> np.ndarray:
        return self.grid.pixel_scores(self.scores)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("EVA_THREADS", "1")))
    except ValueError:
        return 1


def _overlap_from(lower: np.ndarray, upper: np.ndarray, c: int, c_prime: int | None):
    if c_prime is not None:
        return float(upper[c_prime] - lower[c]), c_prime
    vals = upper.copy()
    vals[c] = -np.inf
    adv = int(np.argmax(vals))  # first max: smallest class index on ties
    return float(vals[adv] - lower[c]), adv


def _check_class(net: Network, c: int):
    if net.class_count < 2:
        raise ValueError("adversarial overlap needs at least two classes")
    if not 0 <= c < net.class_count:
        raise IndexError(f"class index {c} out of range")


def ao_upper(net: Network, x, box: PerturbBox, method: BoundMethod, c: int) -> OverlapScore:
    """Certified upper bound on the best wrong-class margin over the box.

    A value <= 0 certifies that no adversarial perturbation exists in the box.
    """
    _check_class(net, c)
    out = bounds(net, box, method)
    value, adv = _overlap_from(out.lower, out.upper, c, None)
    return OverlapScore(value, True, c, adv)


def ao_targeted_upper(
    net: Network, x, box: PerturbBox, method: BoundMethod, c: int, c_prime: int
) -> OverlapScore:
    _check_class(net, c)
    if c_prime == c:
        raise ValueError("target class must differ from the class of interest")
    out = bounds(net, box, method)
    value, adv = _overlap_from(out.lower, out.upper, c, c_prime)
    return OverlapScore(value, True, c, adv)


def ao_empirical(net: Network, x, box: PerturbBox, n: int, seed: int, c: int) -> OverlapScore:
    """Sampled overlap: max margin over n uniform perturbations."""
    _check_class(net, c)
    x = as_tensor(x, net.input_shape)
    deltas = sample_uniform(box, n, seed)
    logits = forward_batch(net, x[None, ...] + deltas)
    margins = logits - logits[:, c][:, None]
    margins[:, c] = -np.inf
    per_class = np.max(margins, axis=0)
    adv = int(np.argmax(per_class))
    return OverlapScore(float(per_class[adv]), False, c, adv)


def eva_score(
    net: Network,
    x,
    u,
    box: PerturbBox,
    method: BoundMethod,
    c: int,
    base: OverlapScore | None = None,
) -> float:
    """Drop in certified overlap when the variables in u are frozen.

    The unmasked term may be supplied once and reused across many u.
    """
    if base is None:
        base = ao_upper(net, x, box, method, c)
    masked = ao_upper(net, x, mask_ball(box, u), method, c)
    return base.value - masked.value


def eva_empirical(net: Network, x, u, box: PerturbBox, n: int, seed: int, c: int) -> float:
    base = ao_empirical(net, x, box, n, int(np.random.default_rng([seed, 0]).integers(2**31)), c)
    masked = ao_empirical(
        net, x, mask_ball(box, u), n, int(np.random.default_rng([seed, 1]).integers(2**31)), c
    )
    return base.value - masked.value


def _masked_batches(box: PerturbBox, grid: CellGrid):
    lo = np.repeat(box.lo.reshape(1, -1), grid.cell_count, axis=0)
    hi = np.repeat(box.hi.reshape(1, -1), grid.cell_count, axis=0)
    for i, idx in enumerate(grid.cells):
        lo[i, idx] = 0.0
        hi[i, idx] = 0.0
    return lo, hi


def _cell_overlaps(net, box, grid, method, c, c_prime=None, chunk=4):
    """Certified overlap of every per-cell masked box, batched."""
    lo, hi = _masked_batches(box, grid)
    center = box.center.ravel()
    values = np.empty(grid.cell_count)
    workers = thread_count()

    def run(lo_chunk, hi_chunk):
        batch = _BoxBatch(center, lo_chunk, hi_chunk, box.norm, box.radius)
        low, up, _ = output_bounds_many(net, batch, method)
        if c_prime is not None:
            return up[:, c_prime] - low[:, c]
        up = up.copy()
        up[:, c] = -np.inf
        return np.max(up, axis=1) - low[:, c]

    spans = [(s, min(s + chunk, grid.cell_count)) for s in range(0, grid.cell_count, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda sp: run(lo[sp[0] : sp[1]], hi[sp[0] : sp[1]]), spans))
    else:
        outs = [run(lo[s:e], hi[s:e]) for s, e in spans]
    for (s, e), v in zip(spans, outs):
        values[s:e] = v
    return values


def eva_map(
    net: Network, x, grid: CellGrid, box: PerturbBox, method: BoundMethod, c: int
) -> AttributionMap:
    """One certified importance score per grid cell."""
    _check_class(net, c)
    base = ao_upper(net, x, box, method, c)
    masked = _cell_overlaps(net, box, grid, method, c)
    scores = base.value - masked
    return AttributionMap(
        scores,
        grid,
        {"variant": "certified", "bound_method": method, "norm": box.norm},
        c,
    )


def empirical_map(
    net: Network, x, grid: CellGrid, box: PerturbBox, n: int, seed: int, c: int
) -> AttributionMap:
    _check_class(net, c)
    scores = np.array(
        [eva_empirical(net, x, idx, box, n, seed + 7919 * i, c) for i, idx in enumerate(grid.cells)]
    )
    return AttributionMap(scores, grid, {"variant": "empirical", "samples": n, "seed": seed}, c)


def hybrid_activation_box(
    net: Network, split_index: int, x, box: PerturbBox, n: int, seed: int
) -> PerturbBox:
    """Sampled bounds of the intermediate activation over the input box.

    The zero perturbation is always included so the activation offsets
    bracket the center.
    """
    if n < 2:
        raise ValueError("need at least two samples for an activation box")
    x = as_tensor(x, net.input_shape)
    deltas = sample_uniform(box, n - 1, seed)
    deltas = np.concatenate([np.zeros((1,) + box.shape), deltas])
    acts = np.stack([activation_at(net, x + d, split_index) for d in deltas])
    center = acts[0]
    lo = acts.min(axis=0) - center
    hi = acts.max(axis=0) - center
    return PerturbBox(center, lo, hi)


def eva_hybrid(
    net: Network,
    split_index: int,
    x,
    u,
    box: PerturbBox,
    n: int,
    seed: int,
    method: BoundMethod,
    c: int,
) -> float:
    """Hybrid score: sampled activation boxes, verified suffix propagation.

    The mask applies in input space; each term gets its own sampled box.
    """
    _check_class(net, c)

    def term(b: PerturbBox, tag: int) -> float:
        s = int(np.random.default_rng([seed, tag]).integers(2**31))
        act_box = hybrid_activation_box(net, split_index, x, b, n, s)
        out = bounds_from_activation(net, split_index, act_box, method)
        val, _ = _overlap_from(out.lower, out.upper, c, None)
        return val

    return term(box, 0) - term(mask_ball(box, u), 1)


def hybrid_map(
    net: Network,
    split_index: int,
    x,
    grid: CellGrid,
    box: PerturbBox,
    n: int,
    seed: int,
    method: BoundMethod,
    c: int,
) -> AttributionMap:
    scores = np.array(
        [
            eva_hybrid(net, split_index, x, idx, box, n, seed + 7919 * i, method, c)
            for i, idx in enumerate(grid.cells)
        ]
    )
    return AttributionMap(
        scores,
        grid,
        {"variant": "hybrid", "split": split_index, "samples": n, "seed": seed},
        c,
    )


def targeted_map(
    net: Network, x, grid: CellGrid, box: PerturbBox, method: BoundMethod, c: int, c_prime: int
) -> AttributionMap:
    """Signed map for a chosen target class from sign-restricted boxes.

    Positive cells: raising those pixels pushes the model toward the
    target class; negative cells: lowering them does.
    """
    _check_class(net, c)
    if c_prime == c:
        raise ValueError("target class must differ from the class of interest")
    plus, minus = sign_split(box)
    phi = []
    for part in (plus, minus):
        base = ao_targeted_upper(net, x, part, method, c, c_prime).value
        phi.append(base - _cell_overlaps(net, part, grid, method, c, c_prime=c_prime))
    scores = phi[0] - phi[1]
    return AttributionMap(
        scores,
        grid,
        {"variant": "targeted", "bound_method": method},
        c,
        target_class=c_prime,
    )
