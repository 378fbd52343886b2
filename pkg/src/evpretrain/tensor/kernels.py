"""Numpy kernels shared by graph nodes and eager helpers.

Images are channels-last: ``(B, H, W, C)`` for convolutions, ``(B, H, W)`` or
``(B, H, W, C)`` for bilinear sampling.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]  # (B, Ho, Wo, C, kh, kw)


def correlate2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation. ``x``: (B, H, W, C); ``w``: (kh, kw, C, O)."""
    kh, kw = w.shape[:2]
    win = _windows(x, kh, kw, stride, pad)
    return np.tensordot(win, w.transpose(2, 0, 1, 3), axes=3)


def correlate2d_grad_w(x: np.ndarray, gout: np.ndarray, kshape: tuple, stride: int, pad: int) -> np.ndarray:
    kh, kw = kshape[:2]
    win = _windows(x, kh, kw, stride, pad)
    gw = np.tensordot(win, gout, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, O)
    return gw.transpose(1, 2, 0, 3)


def transposed_correlate2d(
    y: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw: tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`correlate2d` with respect to its image input.

    ``y``: (B, Ho, Wo, O); returns (B, H, W, C) with ``(H, W) = out_hw``.
    """
    kh, kw, c, _ = w.shape
    b, ho, wo, _ = y.shape
    h, wd = out_hw
    cols = np.tensordot(y, w, axes=([3], [3]))  # (B, Ho, Wo, kh, kw, C)
    hp, wp = h + 2 * pad, wd + 2 * pad
    out = np.zeros((b, hp, wp, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + wd, :]
    return np.ascontiguousarray(out)


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_grad(g: np.ndarray) -> np.ndarray:
    b, h2, w2, c = g.shape
    return g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


def avg_pool2(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avg_pool2_grad(g: np.ndarray) -> np.ndarray:
    return upsample2x(g) * 0.25


def _sample_coords(shape_hw: tuple[int, int], offsets: np.ndarray):
    h, w = shape_hw
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = gx + offsets[..., 0]
    sy = gy + offsets[..., 1]
    inside_x = (sx > 0) & (sx < w - 1)
    inside_y = (sy > 0) & (sy < h - 1)
    xc = np.clip(sx, 0.0, w - 1.0)
    yc = np.clip(sy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.int64)
    wx = xc - x0
    wy = yc - y0
    return x0, y0, wx, wy, inside_x, inside_y


def _gather(img: np.ndarray, yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    b = img.shape[0]
    bi = np.arange(b).reshape((b,) + (1,) * (yi.ndim - 1))
    return img[bi, yi, xi]


def bilinear_sample(img: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``p + offsets(p)`` with border-clamped coordinates.

    ``img``: (B, H, W) or (B, H, W, C); ``offsets``: (B, H, W, 2) with channel 0
    horizontal and channel 1 vertical. Zero offsets return ``img`` unchanged.
    """
    h, w = img.shape[1:3]
    x0, y0, wx, wy, _, _ = _sample_coords((h, w), offsets)
    if img.ndim == 4:
        wx = wx[..., None]
        wy = wy[..., None]
    i00 = _gather(img, y0, x0)
    i01 = _gather(img, y0, x0 + 1)
    i10 = _gather(img, y0 + 1, x0)
    i11 = _gather(img, y0 + 1, x0 + 1)
    return (1 - wy) * ((1 - wx) * i00 + wx * i01) + wy * ((1 - wx) * i10 + wx * i11)


def bilinear_sample_grads(img: np.ndarray, offsets: np.ndarray, gout: np.ndarray):
    """Return ``(d img, d offsets)`` for :func:`bilinear_sample`."""
    b, h, w = img.shape[:3]
    x0, y0, wx, wy, inside_x, inside_y = _sample_coords((h, w), offsets)
    multi = img.ndim == 4
    wxe = wx[..., None] if multi else wx
    wye = wy[..., None] if multi else wy
    i00 = _gather(img, y0, x0)
    i01 = _gather(img, y0, x0 + 1)
    i10 = _gather(img, y0 + 1, x0)
    i11 = _gather(img, y0 + 1, x0 + 1)

    dxc = (1 - wye) * (i01 - i00) + wye * (i11 - i10)
    dyc = (1 - wxe) * (i10 - i00) + wxe * (i11 - i01)
    gx = gout * dxc
    gy = gout * dyc
    if multi:
        gx = gx.sum(axis=-1)
        gy = gy.sum(axis=-1)
    goff = np.stack([gx * inside_x, gy * inside_y], axis=-1)

    bi = np.arange(b).reshape(b, 1, 1)
    base = (bi * h * w)
    n = b * h * w
    corners = (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    )
    if multi:
        c = img.shape[3]
        gimg = np.zeros((n, c))
        for yi, xi, wgt in corners:
            idx = (base + yi * w + xi).ravel()
            contrib = (gout * wgt[..., None]).reshape(-1, c)
            for ch in range(c):
                gimg[:, ch] += np.bincount(idx, weights=contrib[:, ch], minlength=n)
        gimg = gimg.reshape(img.shape)
    else:
        gimg = np.zeros(n)
        for yi, xi, wgt in corners:
            idx = (base + yi * w + xi).ravel()
            gimg += np.bincount(idx, weights=(gout * wgt).ravel(), minlength=n)
        gimg = gimg.reshape(img.shape)
    return gimg, goff


def ste_quantize(s: np.ndarray, c: float) -> np.ndarray:
    """Sign-symmetric quantization ``sign(s) * floor(|s| / c)``."""
    return np.sign(s) * np.floor(np.abs(s) / c)
