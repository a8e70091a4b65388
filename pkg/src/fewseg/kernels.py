"""Spatial kernels: average pooling, bilinear resize, 2-D convolution.

Pooling and resizing are separable linear maps along the two spatial axes,
so forward and backward are both two small matrix contractions; the
per-size coefficient matrices are cached. Convolution is im2col + GEMM.
All kernels operate on channels-last layouts.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor, _need, _result

__all__ = ["avg_pool", "block_pool", "bilinear_resize", "conv2d",
           "channel_norm", "resize_map_np", "avg_pool_np"]


# ---------------------------------------------------------------------------
# coefficient matrices
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _band_matrix(n: int, width: int, dtype: str) -> np.ndarray:
    """Row-normalized band matrix: same-size box mean with zero padding.

    Divides by the full window extent even where the window is clipped at
    the border (zero padding counts toward the mean).
    """
    r = (width - 1) // 2
    m = np.zeros((n, n), dtype=dtype)
    for i in range(n):
        lo, hi = max(0, i - r), min(n, i + r + 1)
        m[i, lo:hi] = 1.0 / width
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _block_matrix(n: int, factor: int, dtype: str) -> np.ndarray:
    m = np.zeros((n // factor, n), dtype=dtype)
    for i in range(n // factor):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    """Align-corners-false bilinear sampling weights along one axis."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _apply_separable(x: np.ndarray, mh: np.ndarray,
                     mw: np.ndarray) -> np.ndarray:
    """Contract (H, W, C) with row matrix mh and column matrix mw."""
    tmp = np.tensordot(mh, x, axes=(1, 0))          # (H', W, C)
    out = np.tensordot(mw, tmp, axes=(1, 1))        # (W', H', C)
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def _separable_op(x: Tensor, mh: np.ndarray, mw: np.ndarray,
                  op: str) -> Tensor:
    mh_t, mw_t = mh.T.copy(), mw.T.copy()

    def vjp(g):
        return (_apply_separable(g, mh_t, mw_t),)

    return _result(_apply_separable(x.data, mh, mw), (x,), vjp, op)


# ---------------------------------------------------------------------------
# pooling and resizing
# ---------------------------------------------------------------------------

def avg_pool(x: Tensor, window) -> Tensor:
    """Same-size average pooling with zero padding and full-area division."""
    _need(x, "avg_pool")
    if x.ndim != 3:
        raise ValueError(f"avg_pool expects (H, W, C) input, got {x.shape}")
    if x.size == 0:
        raise ValueError("avg_pool over empty tensor")
    dh, dw = int(window[0]), int(window[1])
    if dh < 1 or dw < 1 or dh % 2 == 0 or dw % 2 == 0:
        raise ValueError(f"avg_pool window must be odd positive, got "
                         f"({dh}, {dw})")
    h, w = x.shape[:2]
    dt = x.dtype.name
    return _separable_op(x, _band_matrix(h, dh, dt), _band_matrix(w, dw, dt),
                         "avg_pool")


def block_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping block mean downsample by an integer factor."""
    _need(x, "block_pool")
    if x.ndim != 3:
        raise ValueError(f"block_pool expects (H, W, C) input, got {x.shape}")
    factor = int(factor)
    h, w = x.shape[:2]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(
            f"block_pool: factor {factor} must divide extents ({h}, {w})")
    if factor == 1:
        return _separable_op(x, np.eye(h, dtype=x.dtype),
                             np.eye(w, dtype=x.dtype), "block_pool")
    dt = x.dtype.name
    return _separable_op(x, _block_matrix(h, factor, dt),
                         _block_matrix(w, factor, dt), "block_pool")


def bilinear_resize(x: Tensor, size) -> Tensor:
    """Bilinear resample (align-corners-false) of an (H, W[, C]) tensor."""
    _need(x, "bilinear_resize")
    if x.ndim not in (2, 3):
        raise ValueError(f"bilinear_resize expects 2-D or 3-D input, got "
                         f"{x.shape}")
    hout, wout = int(size[0]), int(size[1])
    if hout < 1 or wout < 1:
        raise ValueError(f"bilinear_resize: bad target size ({hout}, {wout})")
    squeeze = x.ndim == 2
    h, w = x.shape[:2]
    dt = x.dtype.name
    mh = _resize_matrix(h, hout, dt)
    mw = _resize_matrix(w, wout, dt)
    if squeeze:
        from .tensor import reshape
        out3 = _separable_op(reshape(x, (h, w, 1)), mh, mw, "bilinear_resize")
        return reshape(out3, (hout, wout))
    return _separable_op(x, mh, mw, "bilinear_resize")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(h, w, k, k, xp.shape[2]), strides=(s0, s1, s0, s1, s2))
    return view.reshape(h * w, k * k * xp.shape[2])


def _conv_forward(xd: np.ndarray, wd: np.ndarray, bd):
    h, w, cin = xd.shape
    k = wd.shape[0]
    if k == 1:
        cols = xd.reshape(h * w, cin)
    else:
        r = (k - 1) // 2
        xp = np.pad(xd, ((r, r), (r, r), (0, 0)))
        cols = _im2col(xp, k, h, w)
    out = cols @ wd.reshape(k * k * cin, -1)
    if bd is not None:
        out = out + bd
    return out.reshape(h, w, -1), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 same-size convolution, kernel 1x1 or 3x3, channels last.

    weight has shape (k, k, C_in, C_out); bias, if given, (C_out,).
    """
    _need(x, "conv2d"), _need(weight, "conv2d")
    if x.ndim != 3:
        raise ValueError(f"conv2d expects (H, W, C) input, got {x.shape}")
    if weight.ndim != 4 or weight.shape[0] != weight.shape[1]:
        raise ValueError(f"conv2d: bad weight shape {weight.shape}")
    k = weight.shape[0]
    if k not in (1, 3):
        raise ValueError(f"conv2d supports kernel sizes 1 and 3, got {k}")
    if weight.shape[2] != x.shape[2]:
        raise ValueError(f"conv2d: input channels {x.shape[2]} vs weight "
                         f"{weight.shape[2]}")
    cout = weight.shape[3]
    if bias is not None:
        _need(bias, "conv2d")
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} vs ({cout},)")

    xd, wd = x.data, weight.data
    bd = bias.data if bias is not None else None
    h, w, cin = xd.shape
    out, cols = _conv_forward(xd, wd, bd)

    # dx is a same-size convolution of g with the kernel flipped spatially
    # and transposed over the channel axes.
    wflip = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2))

    def vjp(g):
        g2 = g.reshape(h * w, cout)
        dwd = (cols.T @ g2).reshape(wd.shape)
        dxd, _ = _conv_forward(g, wflip, None)
        if bias is None:
            return dxd, dwd
        return dxd, dwd, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def channel_norm(x: Tensor, gain: Tensor, bias: Tensor,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over the spatial extent, then affine.

    Batch-free stand-in for the usual conv-block normalization: every
    channel is shifted and scaled to zero mean and unit variance across
    H x W, then remapped by per-channel gain and bias. No running
    statistics, so training and evaluation see the same function. A 1x1
    map has zero variance; its standardized value is exactly 0 and the
    output is just the bias.
    """
    _need(x, "channel_norm"), _need(gain, "channel_norm")
    _need(bias, "channel_norm")
    if x.ndim != 3:
        raise ValueError(f"channel_norm expects (H, W, C) input, got "
                         f"{x.shape}")
    c = x.shape[2]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"channel_norm: affine shapes {gain.shape} / "
                         f"{bias.shape} do not match ({c},) channels")
    if eps <= 0:
        raise ValueError(f"channel_norm: eps must be positive, got {eps}")

    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt(xd.var(axis=(0, 1)) + xd.dtype.type(eps))
    xhat = (xd - xd.mean(axis=(0, 1))) * inv
    out = xhat * gd + bias.data

    def vjp(g):
        prod = g * xhat
        dx = (gd * inv) * (g - g.mean(axis=(0, 1))
                           - xhat * prod.mean(axis=(0, 1)))
        return dx, prod.sum(axis=(0, 1)), g.sum(axis=(0, 1))

    return _result(out, (x, gain, bias), vjp, "channel_norm")


# ---------------------------------------------------------------------------
# plain-ndarray helpers for off-tape paths
# ---------------------------------------------------------------------------

def resize_map_np(m: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a 2-D float map, no tape involved."""
    m = np.asarray(m)
    dt = m.dtype.name if m.dtype in (np.float32, np.float64) else "float64"
    mh = _resize_matrix(m.shape[0], int(size[0]), dt)
    mw = _resize_matrix(m.shape[1], int(size[1]), dt)
    return _apply_separable(m.astype(dt)[:, :, None], mh, mw)[:, :, 0]


def avg_pool_np(x: np.ndarray, window) -> np.ndarray:
    """Same-size box mean of an (H, W, C) array, no tape involved."""
    dh, dw = int(window[0]), int(window[1])
    if dh % 2 == 0 or dw % 2 == 0 or dh < 1 or dw < 1:
        raise ValueError(f"avg_pool window must be odd positive, got "
                         f"({dh}, {dw})")
    h, w = x.shape[:2]
    dt = x.dtype.name
    return _apply_separable(x, _band_matrix(h, dh, dt),
                            _band_matrix(w, dw, dt))
