"""Differentiable layer operations on [C, H, W]-shaped tensors.

Every op here registers a hand-derived backward pass on the tape; all of
them are exercised against nested-loop oracles and central finite
differences by the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

__all__ = [
    "conv2d",
    "group_norm",
    "sigmoid",
    "tanh",
    "relu",
    "softmax_over_depth",
    "log_softmax_over_depth",
    "pool_depth",
    "bilinear_resize",
    "bilinear_sample",
    "slice_channels",
    "log",
    "exp",
]


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice x[start:stop] along axis 0 (cheap gate splitting)."""

    def bw(grad, x=x, start=start, stop=stop):
        g = np.zeros(x.shape, dtype=grad.dtype)
        g[start:stop] = grad
        x._accum(g)

    return Tensor._make(np.ascontiguousarray(x.data[start:stop]), (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(grad, x=x):
        x._accum(grad / x.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(grad, x=x, out=out):
        x._accum(grad * out)

    return Tensor._make(out, (x,), bw)


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w] = x
    return xp


def _im2col(x: np.ndarray, k: int, stride: int, dilation: int, padding: int):
    """Unfold [C, H, W] into a [C*k*k, out_h*out_w] column matrix.

    Channel-major layout keeps the materializing copy sequential along the
    image rows, which dominates conv throughput at these sizes.
    """
    c, h, w = x.shape
    ke = (k - 1) * dilation + 1
    xp = _pad2d(x, padding)
    out_h = (h + 2 * padding - ke) // stride + 1
    out_w = (w + 2 * padding - ke) // stride + 1
    win = sliding_window_view(xp, (ke, ke), axis=(1, 2))
    win = win[:, :: stride, :: stride, :: dilation, :: dilation]
    win = win[:, :out_h, :out_w]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, out_h * out_w)
    return np.ascontiguousarray(cols), out_h, out_w


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of [C_in, H, W] with [C_out, C_in, k, k].

    ``padding = dilation * (k - 1) // 2`` preserves the spatial size at
    stride 1 (kernel extent must be odd).
    """
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd extent, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, weight expects {c_in}")
    xd = x.data
    cols, out_h, out_w = _im2col(xd, k, stride, dilation, padding)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out = wmat @ cols  # [C_out, oh*ow]
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, out_h, out_w)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(grad, x=x, weight=weight, bias=bias, stride=stride,
           dilation=dilation, padding=padding, k=k, out_h=out_h, out_w=out_w):
        c_out = weight.shape[0]
        c_in = x.shape[0]
        h, w = x.shape[1], x.shape[2]
        dmat = grad.reshape(c_out, out_h * out_w)
        # Columns are recomputed instead of kept alive through the recurrence.
        cols, _, _ = _im2col(x.data, k, stride, dilation, padding)
        weight._accum((dmat @ cols.T).reshape(weight.shape))
        if bias is not None:
            bias._accum(dmat.sum(axis=1))
        ke = (k - 1) * dilation + 1
        if stride == 1 and padding <= ke - 1:
            # dX is itself a correlation: flipped kernel over the padded
            # output gradient. One im2col + one GEMM.
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gcols, gh, gw = _im2col(grad, k, 1, dilation, ke - 1 - padding)
            dx = (wflip.reshape(c_in, -1) @ gcols).reshape(c_in, gh, gw)
            x._accum(dx)
            return
        wmat = weight.data.reshape(c_out, -1)
        dcols = (wmat.T @ dmat).reshape(c_in, k, k, out_h, out_w)
        dxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
        for ki in range(k):
            hi = ki * dilation
            for kj in range(k):
                wj = kj * dilation
                dxp[:, hi:hi + stride * out_h:stride, wj:wj + stride * out_w:stride] += dcols[:, ki, kj]
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding]
        x._accum(np.ascontiguousarray(dxp))

    return Tensor._make(out, parents, bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (channels/groups, H, W), then affine."""
    c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"{c} channels not divisible by {groups} groups")
    xg = x.data.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(c, h, w)
    out = gamma.data.reshape(c, 1, 1) * xhat + beta.data.reshape(c, 1, 1)

    def bw(grad, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, groups=groups):
        c, h, w = x.shape
        beta._accum(grad.sum(axis=(1, 2)))
        gamma._accum((grad * xhat).sum(axis=(1, 2)))
        dxhat = (grad * gamma.data.reshape(c, 1, 1)).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        m = dxhat.mean(axis=1, keepdims=True)
        mx = (dxhat * xh).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m - xh * mx)
        x._accum(dx.reshape(c, h, w))

    return Tensor._make(out, (x, gamma, beta), bw)


def sigmoid(x: Tensor) -> Tensor:
    # exp overflow for very negative inputs saturates cleanly to 0.
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))

    def bw(grad, x=x, out=out):
        x._accum(grad * out * (1.0 - out))

    return Tensor._make(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(grad, x=x, out=out):
        x._accum(grad * (1.0 - out * out))

    return Tensor._make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(grad, x=x):
        x._accum(grad * (x.data > 0))

    return Tensor._make(out, (x,), bw)


def softmax_over_depth(x: Tensor) -> Tensor:
    """Softmax along axis 0 of a [D, H, W] volume, max-stabilized."""
    m = x.data.max(axis=0, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=0, keepdims=True)

    def bw(grad, x=x, p=p):
        inner = (grad * p).sum(axis=0, keepdims=True)
        x._accum(p * (grad - inner))

    return Tensor._make(p, (x,), bw)


def log_softmax_over_depth(x: Tensor) -> Tensor:
    """Numerically stable log of :func:`softmax_over_depth`."""
    m = x.data.max(axis=0, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    out = z - lse

    def bw(grad, x=x, out=out):
        p = np.exp(out)
        x._accum(grad - p * grad.sum(axis=0, keepdims=True))

    return Tensor._make(out, (x,), bw)


def pool_depth(x: Tensor, mode: str) -> Tensor:
    """Reduce a [C, Ds, H, W] tensor over the depth axis (``max`` or ``avg``)."""
    if x.ndim != 4:
        raise ValueError(f"expected [C, Ds, H, W], got shape {x.shape}")
    ds = x.shape[1]
    if ds < 1:
        raise ValueError("empty depth axis")
    if mode == "max":
        idx = x.data.argmax(axis=1)
        out = x.data.max(axis=1)

        def bw(grad, x=x, idx=idx):
            g = np.zeros(x.shape, dtype=grad.dtype)
            c, h, w = grad.shape
            ci, hi, wi = np.ogrid[:c, :h, :w]
            g[ci, idx, hi, wi] = grad
            x._accum(g)

    elif mode == "avg":
        out = x.data.mean(axis=1)

        def bw(grad, x=x, ds=ds):
            x._accum(np.repeat(grad[:, None] / ds, ds, axis=1))

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return Tensor._make(np.ascontiguousarray(out), (x,), bw)


def _scatter_add_hw(target: np.ndarray, yi: np.ndarray, xi: np.ndarray,
                    vals: np.ndarray) -> None:
    """target[:, yi, xi] += vals for [C, H, W] targets (bincount-based;
    much faster than np.add.at). ``yi``/``xi`` broadcast against vals[0]."""
    c, h, w = target.shape
    n = h * w
    flat = np.broadcast_to(yi * w + xi, vals.shape[1:]).reshape(1, -1)
    idx = (np.arange(c, dtype=np.int64)[:, None] * n + flat).ravel()
    acc = np.bincount(idx, weights=vals.reshape(c, -1).ravel(), minlength=c * n)
    target += acc.reshape(c, h, w).astype(target.dtype, copy=False)


def _resize_axis(n_in: int, n_out: int):
    """Source indices and weights for align-corners-false interpolation."""
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(s).astype(np.int64)
    frac = s - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [C, H, W] (align-corners-false, edge-replicated)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x * 1.0
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy = fy.astype(x.data.dtype)[None, :, None]
    fx = fx.astype(x.data.dtype)[None, None, :]
    d = x.data
    top = d[:, y0][:, :, x0] * (1 - fx) + d[:, y0][:, :, x1] * fx
    bot = d[:, y1][:, :, x0] * (1 - fx) + d[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy

    def bw(grad, x=x, y0=y0, y1=y1, x0=x0, x1=x1, fy=fy, fx=fx):
        g = np.zeros(x.shape, dtype=grad.dtype)
        yy0, yy1 = y0[:, None], y1[:, None]
        xx0, xx1 = x0[None, :], x1[None, :]
        _scatter_add_hw(g, yy0, xx0, grad * ((1 - fy) * (1 - fx)))
        _scatter_add_hw(g, yy0, xx1, grad * ((1 - fy) * fx))
        _scatter_add_hw(g, yy1, xx0, grad * (fy * (1 - fx)))
        _scatter_add_hw(g, yy1, xx1, grad * (fy * fx))
        x._accum(g)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw)


def bilinear_sample(feat: Tensor, px: np.ndarray, py: np.ndarray):
    """Sample [C, H, W] features at continuous pixel coordinates.

    ``px``/``py`` give, per output pixel, the source x/y coordinate (pixel
    (x, y) lives at continuous coordinate (x, y)). Samples outside
    [0, W-1] x [0, H-1] return 0; the returned mask is 1 where the sample
    location is inside. Differentiable w.r.t. ``feat`` only.

    Returns:
        (values Tensor[C, outH, outW], mask ndarray[1, outH, outW]).
    """
    c, h, w = feat.shape
    dt = feat.data.dtype
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(dt)
    fy = (py - y0).astype(dt)
    x1, y1 = x0 + 1, y0 + 1

    def inb(xi, yi):
        return ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(dt)

    corners = []
    for xi, yi, wgt in (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x1, y0, fx * (1 - fy)),
        (x0, y1, (1 - fx) * fy),
        (x1, y1, fx * fy),
    ):
        m = inb(xi, yi)
        corners.append((np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1), wgt * m))
    out = np.zeros((c,) + px.shape, dtype=dt)
    for xi, yi, wgt in corners:
        out += feat.data[:, yi, xi] * wgt
    mask = ((px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)).astype(dt)
    out *= mask
    mask = mask[None]

    def bw(grad, feat=feat, corners=corners, mask=mask):
        g = np.zeros(feat.shape, dtype=grad.dtype)
        gm = grad * mask
        for xi, yi, wgt in corners:
            _scatter_add_hw(g, yi, xi, gm * wgt)
        feat._accum(g)

    return Tensor._make(out, (feat,), bw), mask
