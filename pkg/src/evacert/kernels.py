"""Hot inner loops for convolution and pooling.

Every kernel exists twice: a pure-numpy implementation and a numba
``@njit`` version compiled from the same scalar loops. The active set is
chosen at import time; set ``EVA_NO_NUMBA=1`` to force the numpy path
(or when numba is unavailable). The gather kernels (im2col, maxpool)
are bit-identical across paths; col2im accumulates overlapping patches
in a different order per path, so it agrees to rounding only.

``benchmarks/bench_kernels.py`` compares the two paths head to head.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "USING_NUMBA",
    "conv_out_size",
    "conv_padding",
    "im2col",
    "col2im_add",
    "maxpool_forward",
    "maxpool_backward",
    "im2col_numpy",
    "col2im_add_numpy",
    "maxpool_forward_numpy",
]


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + pad - k) // stride + 1


def conv_padding(size: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    """Total (before, after) zero padding for one spatial dimension."""
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // stride)  # ceil
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2
    raise ValueError(f"unknown padding mode: {padding!r}")


# ---------------------------------------------------------------------------
# scalar-loop implementations (numba-compilable)
# ---------------------------------------------------------------------------


def _im2col_loops(x, kh, kw, sh, sw, pt, pl, oh, ow):
    c, h, w = x.shape
    cols = np.zeros((oh * ow, c * kh * kw), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            row = i * ow + j
            for ch in range(c):
                for di in range(kh):
                    src_i = i * sh + di - pt
                    for dj in range(kw):
                        src_j = j * sw + dj - pl
                        if 0 <= src_i < h and 0 <= src_j < w:
                            cols[row, ch * kh * kw + di * kw + dj] = x[ch, src_i, src_j]
    return cols


def _col2im_add_loops(cols, c, h, w, kh, kw, sh, sw, pt, pl, oh, ow):
    dx = np.zeros((c, h, w), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            row = i * ow + j
            for ch in range(c):
                for di in range(kh):
                    src_i = i * sh + di - pt
                    for dj in range(kw):
                        src_j = j * sw + dj - pl
                        if 0 <= src_i < h and 0 <= src_j < w:
                            dx[ch, src_i, src_j] += cols[row, ch * kh * kw + di * kw + dj]
    return dx


def _maxpool_forward_loops(x, wh, ww, sh, sw):
    c, h, w = x.shape
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    out = np.empty((c, oh, ow), dtype=np.float64)
    # flat index into (h, w); first maximal element in scan order wins
    arg = np.empty((c, oh, ow), dtype=np.int64)
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                best = -np.inf
                best_idx = -1
                for di in range(wh):
                    for dj in range(ww):
                        si = i * sh + di
                        sj = j * sw + dj
                        v = x[ch, si, sj]
                        if v > best:
                            best = v
                            best_idx = si * w + sj
                out[ch, i, j] = best
                arg[ch, i, j] = best_idx
    return out, arg


def _maxpool_backward_loops(grad_out, arg, c, h, w):
    dx = np.zeros((c, h, w), dtype=np.float64)
    oh, ow = grad_out.shape[1], grad_out.shape[2]
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                idx = arg[ch, i, j]
                dx[ch, idx // w, idx % w] += grad_out[ch, i, j]
    return dx


# ---------------------------------------------------------------------------
# vectorized numpy fallbacks
# ---------------------------------------------------------------------------


def im2col_numpy(x, kh, kw, sh, sw, pt, pl, oh, ow):
    c, h, w = x.shape
    pad_b = max(0, (oh - 1) * sh + kh - pt - h)
    pad_r = max(0, (ow - 1) * sw + kw - pl - w)
    xp = np.pad(x, ((0, 0), (pt, pad_b), (pl, pad_r)))
    cols = np.empty((oh * ow, c, kh, kw), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di : di + oh * sh : sh, dj : dj + ow * sw : sw]
            cols[:, :, di, dj] = patch.reshape(c, oh * ow).T
    return cols.reshape(oh * ow, c * kh * kw)


def col2im_add_numpy(cols, c, h, w, kh, kw, sh, sw, pt, pl, oh, ow):
    pad_b = max(0, (oh - 1) * sh + kh - pt - h)
    pad_r = max(0, (ow - 1) * sw + kw - pl - w)
    dxp = np.zeros((c, h + pt + pad_b, w + pl + pad_r), dtype=np.float64)
    cols4 = cols.reshape(oh * ow, c, kh, kw)
    for di in range(kh):
        for dj in range(kw):
            patch = cols4[:, :, di, dj].T.reshape(c, oh, ow)
            dxp[:, di : di + oh * sh : sh, dj : dj + ow * sw : sw] += patch
    return dxp[:, pt : pt + h, pl : pl + w]


def maxpool_forward_numpy(x, wh, ww, sh, sw):
    c, h, w = x.shape
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    windows = np.empty((c, oh, ow, wh * ww), dtype=np.float64)
    idx = np.empty((oh, ow, wh * ww), dtype=np.int64)
    for di in range(wh):
        for dj in range(ww):
            k = di * ww + dj
            windows[:, :, :, k] = x[:, di : di + oh * sh : sh, dj : dj + ow * sw : sw]
            rows = np.arange(oh)[:, None] * sh + di
            colz = np.arange(ow)[None, :] * sw + dj
            idx[:, :, k] = rows * w + colz
    best = np.argmax(windows, axis=3)  # first max in scan order
    out = np.take_along_axis(windows, best[..., None], axis=3)[..., 0]
    arg = idx[None, :, :, :].repeat(c, axis=0)
    arg = np.take_along_axis(arg, best[..., None], axis=3)[..., 0]
    return out, arg


_disabled = os.environ.get("EVA_NO_NUMBA", "") not in ("", "0")
USING_NUMBA = False

if not _disabled:
    try:
        from numba import njit

        _im2col_jit = njit(cache=True)(_im2col_loops)
        _col2im_jit = njit(cache=True)(_col2im_add_loops)
        _maxpool_fwd_jit = njit(cache=True)(_maxpool_forward_loops)
        _maxpool_bwd_jit = njit(cache=True)(_maxpool_backward_loops)
        USING_NUMBA = True
    except ImportError:
        pass

if USING_NUMBA:
    im2col = _im2col_jit
    col2im_add = _col2im_jit
    maxpool_forward = _maxpool_fwd_jit
    maxpool_backward = _maxpool_bwd_jit
else:
    im2col = im2col_numpy
    col2im_add = col2im_add_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = _maxpool_backward_loops
