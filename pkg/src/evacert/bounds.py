"""Certified output bounds over a perturbation box.

Three propagation schemes plus combinations:

* interval propagation (constant bounds per layer),
* forward affine relaxation (linear forms in the input perturbation,
  concretized at the end),
* backward linear relaxation (output coefficients propagated back to the
  input, per-neuron ReLU lines chosen by coefficient sign).

All internals are vectorized over a batch of boxes that share a center,
which is what a per-cell attribution map produces; the public functions
are the single-box views. Conv layers are materialized as dense matrices
(desk-scale networks only); MaxPool is not relaxed in the backward pass
and triggers a flagged fallback onto the forward bounds.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from . import kernels
from .network import Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, Softmax
from .perturbation import PerturbBox

__all__ = [
    "IntervalBounds",
    "AffineBounds",
    "LayerBoundsTrace",
    "BoundMethod",
    "METHODS",
    "ibp_bounds",
    "forward_affine_bounds",
    "backward_bounds",
    "combine_bounds",
    "bounds",
    "bounds_from_activation",
]

BoundMethod = str
METHODS = ("ibp", "forward", "backward", "ibp+fo", "ibp+fo+ba")


@dataclass(frozen=True, eq=False)
class IntervalBounds:
    lower: np.ndarray
    upper: np.ndarray
    backward_fallback: bool = False

    def __post_init__(self):
        if np.any(self.lower > self.upper + 1e-12):
            raise ValueError("interval lower exceeds upper")

    @property
    def gap(self) -> np.ndarray:
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class AffineBounds:
    """A_l . delta + b_l <= z(x + delta) <= A_u . delta + b_u over the box."""

    a_lower: np.ndarray
    b_lower: np.ndarray
    a_upper: np.ndarray
    b_upper: np.ndarray


@dataclass(frozen=True, eq=False)
class LayerBoundsTrace:
    """Pre-activation intervals for every ReLU/MaxPool, in layer order."""

    entries: tuple[IntervalBounds, ...]


def combine_bounds(parts) -> IntervalBounds:
    """Elementwise intersection of interval bounds."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to combine")
    lower = np.max([p.lower for p in parts], axis=0)
    upper = np.min([p.upper for p in parts], axis=0)
    flag = any(p.backward_fallback for p in parts)
    return IntervalBounds(lower, upper, flag)


# ---------------------------------------------------------------------------
# network linearization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Linear:
    w: np.ndarray
    b: np.ndarray
    w_abs: np.ndarray


@dataclass(frozen=True, eq=False)
class _Relu:
    size: int


@dataclass(frozen=True, eq=False)
class _Pool:
    windows: np.ndarray  # (n_out, window) flat indices into the input
    size: int


def _conv_as_matrix(layer: Conv2D, in_shape) -> tuple[np.ndarray, np.ndarray]:
    c_in, h, w = in_shape
    c_out, _, kh, kw = layer.kernels.shape
    pt, pb = kernels.conv_padding(h, kh, layer.stride, layer.padding)
    pl, pr = kernels.conv_padding(w, kw, layer.stride, layer.padding)
    oh = (h + pt + pb - kh) // layer.stride + 1
    ow = (w + pl + pr - kw) // layer.stride + 1
    n_in = c_in * h * w
    # gather map: entries are source flat index + 1, zero where padded
    marker = np.arange(1, n_in + 1, dtype=np.float64).reshape(in_shape)
    pos = kernels.im2col_numpy(marker, kh, kw, layer.stride, layer.stride, pt, pl, oh, ow)
    pos = np.rint(pos).astype(np.int64) - 1  # -1 marks padding
    kmat = layer.kernels.reshape(c_out, -1)
    big = np.zeros((c_out, oh * ow, n_in))
    for k in range(pos.shape[1]):
        valid = pos[:, k] >= 0
        big[:, valid, pos[valid, k]] += kmat[:, k][:, None]
    wmat = big.reshape(c_out * oh * ow, n_in)
    bvec = np.repeat(layer.bias, oh * ow)
    return wmat, bvec


def _pool_windows(layer: MaxPool2D, in_shape) -> np.ndarray:
    c, h, w = in_shape
    wh, ww = layer.window
    sh, sw = layer.stride
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    wins = np.empty((c, oh, ow, wh * ww), dtype=np.int64)
    for di in range(wh):
        for dj in range(ww):
            rows = np.arange(oh)[:, None] * sh + di
            cols = np.arange(ow)[None, :] * sw + dj
            wins[:, :, :, di * ww + dj] = (
                np.arange(c)[:, None, None] * h * w + rows * w + cols
            )
    return wins.reshape(c * oh * ow, wh * ww)


def _linearize(net: Network, start: int = 0):
    """Flatten a layer suffix into linear/relu/pool blocks."""
    blocks = []
    shape = net.shape_after(start)
    for layer in net.layers[start:]:
        if isinstance(layer, Softmax):
            break
        if isinstance(layer, Dense):
            blocks.append(_Linear(layer.weights, layer.bias, np.abs(layer.weights)))
            shape = (layer.weights.shape[0],)
        elif isinstance(layer, Conv2D):
            from .network import layer_output_shape

            wmat, bvec = _conv_as_matrix(layer, shape)
            blocks.append(_Linear(wmat, bvec, np.abs(wmat)))
            shape = layer_output_shape(layer, shape)
        elif isinstance(layer, ReLU):
            blocks.append(_Relu(int(np.prod(shape))))
        elif isinstance(layer, MaxPool2D):
            from .network import layer_output_shape

            blocks.append(_Pool(_pool_windows(layer, shape), int(np.prod(shape))))
            shape = layer_output_shape(layer, shape)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        else:
            raise TypeError(f"unsupported layer in bound propagation: {layer!r}")
    return _fuse_linear(blocks)


def _fuse_linear(blocks):
    """Merge adjacent linear blocks so purely affine stretches propagate
    exactly (interval arithmetic composed layer-wise would widen them)."""
    fused = []
    for blk in blocks:
        if isinstance(blk, _Linear) and fused and isinstance(fused[-1], _Linear):
            prev = fused.pop()
            w = blk.w @ prev.w
            b = blk.w @ prev.b + blk.b
            fused.append(_Linear(w, b, np.abs(w)))
        else:
            fused.append(blk)
    return fused


_lin_cache: "weakref.WeakKeyDictionary[Network, dict]" = weakref.WeakKeyDictionary()


def _blocks(net: Network, start: int = 0):
    per_net = _lin_cache.setdefault(net, {})
    if start not in per_net:
        per_net[start] = _linearize(net, start)
    return per_net[start]


# ---------------------------------------------------------------------------
# batched box representation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BoxBatch:
    center: np.ndarray  # (d,)
    lo: np.ndarray  # (m, d)
    hi: np.ndarray  # (m, d)
    norm: float
    radius: float | None

    @property
    def m(self) -> int:
        return self.lo.shape[0]

    @property
    def mid(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def rad(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    @property
    def free(self) -> np.ndarray:
        return self.hi > self.lo


def _batch_of(box: PerturbBox) -> _BoxBatch:
    return _BoxBatch(
        box.center.ravel(),
        box.lo.reshape(1, -1),
        box.hi.reshape(1, -1),
        box.norm,
        box.radius,
    )


def _dual_term(a: np.ndarray, batch: _BoxBatch) -> np.ndarray:
    """max over the ball of a . delta, per row of coefficients."""
    if np.isinf(batch.norm):
        raise AssertionError("dual term is for p in {1, 2}")
    masked = np.where(batch.free[:, None, :], a, 0.0)
    if batch.norm == 1:
        return batch.radius * np.max(np.abs(masked), axis=-1)
    return batch.radius * np.sqrt(np.sum(masked * masked, axis=-1))


def _concretize(a, b, batch: _BoxBatch):
    """Bounds of a . delta + b over the box batch. a: (m, n, d), b: (m, n)."""
    if np.isinf(batch.norm):
        shift = np.einsum("mnd,md->mn", a, batch.mid)
        spread = np.einsum("mnd,md->mn", np.abs(a), batch.rad)
        return b + shift - spread, b + shift + spread
    spread = _dual_term(a, batch)
    return b - spread, b + spread


def _relu_lines(l: np.ndarray, u: np.ndarray):
    """Per-neuron relaxation lines for pre-activation interval [l, u].

    Upper line slope/intercept (su, tu); lower line slope sl, intercept 0.
    Stable neurons degenerate to identity or zero.
    """
    unstable = (l < 0) & (u > 0)
    denom = np.where(unstable, u - l, 1.0)
    su = np.where(unstable, u / denom, np.where(u <= 0, 0.0, 1.0))
    tu = np.where(unstable, -l * u / denom, 0.0)
    sl = np.where(unstable, (u >= -l).astype(np.float64), np.where(u <= 0, 0.0, 1.0))
    return su, tu, sl


# ---------------------------------------------------------------------------
# interval propagation
# ---------------------------------------------------------------------------


def _ibp_many(blocks, batch: _BoxBatch):
    c = batch.center[None, :] + batch.mid
    r = batch.rad.copy()
    trace = []
    for blk in blocks:
        if isinstance(blk, _Linear):
            c = c @ blk.w.T + blk.b
            r = r @ blk.w_abs.T
        elif isinstance(blk, _Relu):
            trace.append((c - r, c + r))
            lo = np.maximum(c - r, 0.0)
            hi = np.maximum(c + r, 0.0)
            c, r = (lo + hi) / 2.0, (hi - lo) / 2.0
        else:  # _Pool
            trace.append((c - r, c + r))
            lo = np.max((c - r)[:, blk.windows], axis=-1)
            hi = np.max((c + r)[:, blk.windows], axis=-1)
            c, r = (lo + hi) / 2.0, (hi - lo) / 2.0
    return (c - r, c + r), trace


# ---------------------------------------------------------------------------
# forward affine relaxation
# ---------------------------------------------------------------------------


def _fwd_many(blocks, batch: _BoxBatch):
    m, d = batch.lo.shape
    # affine forms start as the identity in delta with offset x
    a_l = a_u = None  # None encodes identity coefficients
    b_l = b_u = np.broadcast_to(batch.center, (m, d))
    trace = []

    def conc(al, bl, au, bu):
        if al is None:
            eye = np.broadcast_to(np.eye(d), (m, d, d))
            lo, _ = _concretize(eye, bl, batch)
            _, hi = _concretize(eye, bu, batch)
            return lo, hi
        lo, _ = _concretize(al, bl, batch)
        _, hi = _concretize(au, bu, batch)
        return lo, hi

    for blk in blocks:
        if isinstance(blk, _Linear):
            if a_l is None:
                a_l = a_u = np.broadcast_to(blk.w, (m,) + blk.w.shape)
                b = b_l @ blk.w.T + blk.b
                b_l = b_u = b
            else:
                # W+ A_l + W- A_u  ==  (W S - |W| D) / 2 with S = A_l + A_u,
                # D = A_u - A_l: two matmuls instead of four
                s = np.matmul(blk.w, a_l + a_u)
                dd = np.matmul(blk.w_abs, a_u - a_l)
                a_l = (s - dd) / 2.0
                a_u = (s + dd) / 2.0
                bs = (b_l + b_u) @ blk.w.T + 2.0 * blk.b
                bd = (b_u - b_l) @ blk.w_abs.T
                b_l = (bs - bd) / 2.0
                b_u = (bs + bd) / 2.0
        elif isinstance(blk, _Relu):
            l, u = conc(a_l, b_l, a_u, b_u)
            trace.append((l, u))
            su, tu, sl = _relu_lines(l, u)
            if a_l is None:
                eye = np.broadcast_to(np.eye(d), (m, d, d))
                a_l, a_u = eye, eye
            a_u = a_u * su[:, :, None]
            b_u = b_u * su + tu
            a_l = a_l * sl[:, :, None]
            b_l = b_l * sl
        else:  # _Pool: fall back to constant interval forms for its outputs
            l, u = conc(a_l, b_l, a_u, b_u)
            trace.append((l, u))
            lo = np.max(l[:, blk.windows], axis=-1)
            hi = np.max(u[:, blk.windows], axis=-1)
            n_out = lo.shape[1]
            a_l = np.zeros((m, n_out, d))
            a_u = np.zeros((m, n_out, d))
            b_l, b_u = lo, hi
    lo, hi = conc(a_l, b_l, a_u, b_u)
    if a_l is None:
        eye = np.broadcast_to(np.eye(d), (m, d, d))
        a_l, a_u = eye, eye
    return (lo, hi), trace, (a_l, b_l, a_u, b_u)


# ---------------------------------------------------------------------------
# backward linear relaxation
# ---------------------------------------------------------------------------


def _bwd_many(blocks, batch: _BoxBatch, trace):
    """CROWN-style pass; returns None when a pool blocks the path."""
    if any(isinstance(b, _Pool) for b in blocks):
        return None
    m = batch.m
    n_out = blocks[-1].w.shape[0] if isinstance(blocks[-1], _Linear) else blocks[-1].size
    lam_u = np.broadcast_to(np.eye(n_out), (m, n_out, n_out))
    lam_l = lam_u
    off_u = np.zeros((m, n_out))
    off_l = np.zeros((m, n_out))
    relu_i = len(trace)
    for blk in reversed(blocks):
        if isinstance(blk, _Linear):
            off_u = off_u + lam_u @ blk.b
            off_l = off_l + lam_l @ blk.b
            lam_u = np.matmul(lam_u, blk.w)
            lam_l = np.matmul(lam_l, blk.w)
        else:  # _Relu
            relu_i -= 1
            l, u = trace[relu_i]
            su, tu, sl = _relu_lines(l, u)
            pu, nu = np.maximum(lam_u, 0.0), np.minimum(lam_u, 0.0)
            pl_, nl = np.maximum(lam_l, 0.0), np.minimum(lam_l, 0.0)
            off_u = off_u + np.einsum("mcn,mn->mc", pu, tu)
            off_l = off_l + np.einsum("mcn,mn->mc", nl, tu)
            lam_u = pu * su[:, None, :] + nu * sl[:, None, :]
            lam_l = pl_ * sl[:, None, :] + nl * su[:, None, :]
    base_u = off_u + np.einsum("mcn,n->mc", lam_u, batch.center)
    base_l = off_l + np.einsum("mcn,n->mc", lam_l, batch.center)
    _, hi = _concretize(lam_u, base_u, batch)
    lo, _ = _concretize(lam_l, base_l, batch)
    return lo, hi


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _tighten_trace(t1, t2):
    return [(np.maximum(l1, l2), np.minimum(u1, u2)) for (l1, u1), (l2, u2) in zip(t1, t2)]


def output_bounds_many(net: Network, batch: _BoxBatch, method: BoundMethod, start: int = 0):
    """Batched entry point; returns (lower (m, c), upper (m, c), fallback_flag)."""
    blocks = _blocks(net, start)
    if method == "ibp":
        (lo, hi), _ = _ibp_many(blocks, batch)
        return lo, hi, False
    if method == "forward":
        (lo, hi), _, _ = _fwd_many(blocks, batch)
        return lo, hi, False
    if method == "backward":
        _, trace = _ibp_many(blocks, batch)
        out = _bwd_many(blocks, batch, trace)
        if out is None:
            (lo, hi), _, _ = _fwd_many(blocks, batch)
            return lo, hi, True
        return out[0], out[1], False
    if method == "ibp+fo":
        (il, iu), _ = _ibp_many(blocks, batch)
        (fl, fu), _, _ = _fwd_many(blocks, batch)
        return np.maximum(il, fl), np.minimum(iu, fu), False
    if method == "ibp+fo+ba":
        (il, iu), it = _ibp_many(blocks, batch)
        (fl, fu), ft, _ = _fwd_many(blocks, batch)
        lo = np.maximum(il, fl)
        hi = np.minimum(iu, fu)
        out = _bwd_many(blocks, batch, _tighten_trace(it, ft))
        if out is None:
            return lo, hi, True
        return np.maximum(lo, out[0]), np.minimum(hi, out[1]), False
    raise ValueError(f"unknown bound method {method!r}; expected one of {METHODS}")


def _check_box(net: Network, box: PerturbBox, start: int = 0):
    expect = net.shape_after(start)
    if tuple(box.shape) != tuple(expect):
        raise ValueError(f"box shape {box.shape} does not match network input {expect}")


def ibp_bounds(net: Network, box: PerturbBox):
    _check_box(net, box)
    batch = _batch_of(box)
    (lo, hi), trace = _ibp_many(_blocks(net), batch)
    entries = tuple(IntervalBounds(l[0], u[0]) for l, u in trace)
    return IntervalBounds(lo[0], hi[0]), LayerBoundsTrace(entries)


def forward_affine_bounds(net: Network, box: PerturbBox):
    _check_box(net, box)
    batch = _batch_of(box)
    (lo, hi), trace, (a_l, b_l, a_u, b_u) = _fwd_many(_blocks(net), batch)
    entries = tuple(IntervalBounds(l[0], u[0]) for l, u in trace)
    affine = AffineBounds(np.array(a_l[0]), b_l[0], np.array(a_u[0]), b_u[0])
    return IntervalBounds(lo[0], hi[0]), LayerBoundsTrace(entries), affine


def backward_bounds(net: Network, box: PerturbBox, trace: LayerBoundsTrace, p: float | None = None):
    _check_box(net, box)
    batch = _batch_of(box)
    if p is not None and p != batch.norm:
        radius = box.radius if box.radius is not None else float(np.max(box.hi))
        batch = _BoxBatch(batch.center, batch.lo, batch.hi, float(p), radius)
    raw = [(e.lower[None, :], e.upper[None, :]) for e in trace.entries]
    blocks = _blocks(net)
    n_nonlinear = sum(isinstance(b, (_Relu, _Pool)) for b in blocks)
    if len(raw) != n_nonlinear:
        raise ValueError("trace does not cover every nonlinearity")
    out = _bwd_many(blocks, batch, raw)
    if out is None:
        (lo, hi), _, _ = _fwd_many(blocks, batch)
        return IntervalBounds(lo[0], hi[0], backward_fallback=True)
    return IntervalBounds(out[0][0], out[1][0])


def bounds(net: Network, box: PerturbBox, method: BoundMethod) -> IntervalBounds:
    """Certified output interval for the requested method combination."""
    _check_box(net, box)
    lo, hi, flag = output_bounds_many(net, _batch_of(box), method)
    return IntervalBounds(lo[0], hi[0], backward_fallback=flag)


def bounds_from_activation(
    net: Network, split_index: int, activation_box: PerturbBox, method: BoundMethod
) -> IntervalBounds:
    """Bounds of the layer suffix [split_index, end) over an activation box."""
    if not 0 <= split_index <= len(net.layers):
        raise IndexError(f"split index {split_index} out of range")
    _check_box(net, activation_box, start=split_index)
    lo, hi, flag = output_bounds_many(net, _batch_of(activation_box), method, start=split_index)
    return IntervalBounds(lo[0], hi[0], backward_fallback=flag)
