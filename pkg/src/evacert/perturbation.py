"""Perturbation-set algebra: L-inf boxes, masked and sign-split balls,
grid partitions of an image, and uniform sampling.

A box stores per-coordinate offsets (lo <= 0 <= hi) around a center
point. Masked variables are exactly frozen (lo = hi = 0). L1/L2 balls
are carried as their bounding box plus (norm, radius) metadata; only the
backward concretization exploits the metadata via dual norms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import as_tensor

__all__ = [
    "PerturbBox",
    "CellGrid",
    "linf_ball",
    "lp_ball",
    "mask_ball",
    "sign_split",
    "grid_cells",
    "grid_for_shape",
    "sample_uniform",
]


@dataclass(frozen=True, eq=False)
class PerturbBox:
    center: np.ndarray
    lo: np.ndarray  # per-coordinate lower offsets, <= 0
    hi: np.ndarray  # per-coordinate upper offsets, >= 0
    clip_range: tuple[float, float] | None = None
    norm: float = np.inf  # ball norm; box offsets always bound the ball
    radius: float | None = None  # ball radius for norm in {1, 2}

    def __post_init__(self):
        c = as_tensor(self.center)
        lo = as_tensor(self.lo, c.shape)
        hi = as_tensor(self.hi, c.shape)
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("box offsets must satisfy lo <= 0 <= hi")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.center.shape

    @property
    def frozen_mask(self) -> np.ndarray:
        """Coordinates pinned to zero perturbation."""
        return (self.lo == 0) & (self.hi == 0)

    def lower_input(self) -> np.ndarray:
        return self.center + self.lo

    def upper_input(self) -> np.ndarray:
        return self.center + self.hi


def _as_index_set(u, size: int) -> np.ndarray:
    idx = np.unique(np.asarray(u, dtype=np.int64).ravel()) if len(u) else np.empty(0, np.int64)
    if idx.size and (idx[0] < 0 or idx[-1] >= size):
        raise IndexError("variable index out of range")
    return idx


def linf_ball(x, eps: float, clip_range: tuple[float, float] | None = (0.0, 1.0)) -> PerturbBox:
    """Coordinate box realizing the radius-eps L-inf ball around x."""
    if eps <= 0:
        raise ValueError("ball radius must be positive")
    x = as_tensor(x)
    lo = np.full(x.shape, -eps)
    hi = np.full(x.shape, eps)
    if clip_range is not None:
        cmin, cmax = clip_range
        lo = np.maximum(lo, cmin - x)
        hi = np.minimum(hi, cmax - x)
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
    return PerturbBox(x, lo, hi, clip_range=clip_range)


def lp_ball(x, eps: float, p: float, clip_range=None) -> PerturbBox:
    """L1/L2 ball as bounding box plus norm metadata (no clipping, no masks
    during interval propagation; backward concretizes via the dual norm)."""
    if eps <= 0:
        raise ValueError("ball radius must be positive")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2 (use linf_ball for p=inf)")
    x = as_tensor(x)
    lo = np.full(x.shape, -eps)
    hi = np.full(x.shape, eps)
    return PerturbBox(x, lo, hi, clip_range=clip_range, norm=float(p), radius=float(eps))


def mask_ball(box: PerturbBox, u) -> PerturbBox:
    """Freeze the variables in u (no perturbation on them)."""
    idx = _as_index_set(u, box.center.size)
    lo = box.lo.copy().ravel()
    hi = box.hi.copy().ravel()
    lo[idx] = 0.0
    hi[idx] = 0.0
    return replace(box, lo=lo.reshape(box.shape), hi=hi.reshape(box.shape))


def sign_split(box: PerturbBox) -> tuple[PerturbBox, PerturbBox]:
    """Split into the nonnegative-offset and nonpositive-offset boxes."""
    plus = replace(box, lo=np.zeros_like(box.lo))
    minus = replace(box, hi=np.zeros_like(box.hi))
    return plus, minus


@dataclass(frozen=True, eq=False)
class CellGrid:
    height: int
    width: int
    channels: int
    side: int
    cells: tuple[np.ndarray, ...]  # flat pixel indices per cell, row-major cells

    @property
    def cell_count(self) -> int:
        return len(self.cells)

    def pixel_scores(self, cell_scores: np.ndarray) -> np.ndarray:
        """Expand per-cell scores to a flat per-coordinate array."""
        out = np.zeros(self.channels * self.height * self.width)
        for idx, s in zip(self.cells, np.asarray(cell_scores).ravel()):
            out[idx] = s
        return out


def grid_cells(height: int, width: int, channels: int, g: int) -> CellGrid:
    """Partition an image into a g-by-g cell grid; boundaries at round(i*d/g)."""
    if g < 1:
        raise ValueError("grid side must be >= 1")
    if g > min(height, width):
        raise ValueError("grid side exceeds image size")
    rows = [int(round(i * height / g)) for i in range(g + 1)]
    cols = [int(round(j * width / g)) for j in range(g + 1)]
    cells = []
    for i in range(g):
        for j in range(g):
            rr = np.arange(rows[i], rows[i + 1])
            cc = np.arange(cols[j], cols[j + 1])
            pix = (rr[:, None] * width + cc[None, :]).ravel()
            if channels > 1:
                # (c, h, w) layout: every channel of a pixel joins its cell
                pix = (np.arange(channels)[:, None] * height * width + pix[None, :]).ravel()
            cells.append(np.sort(pix))
    return CellGrid(height, width, channels, g, tuple(cells))


def grid_for_shape(shape, g: int) -> CellGrid:
    """Grid for an input shape: (c, h, w) images or flat square vectors."""
    if len(shape) == 3:
        channels, height, width = shape
    elif len(shape) == 2:
        channels, (height, width) = 1, shape
    else:
        side = int(round(np.sqrt(shape[0])))
        if side * side != shape[0]:
            raise ValueError("flat input is not a square image; cannot infer grid")
        channels, height, width = 1, side, side
    return grid_cells(height, width, channels, g)


def sample_uniform(box: PerturbBox, n: int, seed: int) -> np.ndarray:
    """n iid perturbations, each coordinate uniform in [lo, hi].

    Deterministic per seed; sample sets nest across n for a fixed seed.
    Frozen coordinates are exactly zero.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if not np.isinf(box.norm):
        raise ValueError("uniform box sampling requires an L-inf box")
    rng = np.random.default_rng(seed)
    lo = box.lo.ravel()
    hi = box.hi.ravel()
    u = rng.random((n, lo.size))
    deltas = lo + u * (hi - lo)
    deltas[:, box.frozen_mask.ravel()] = 0.0
    return deltas.reshape((n,) + box.shape)
