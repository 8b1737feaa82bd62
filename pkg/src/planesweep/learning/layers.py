"""Minimal 2-D conv layer zoo with hand-written exact backward passes.

Arrays are H x W x C (single image, float64).  Convolution weights are
(kh, kw, c_in, c_out).  Every forward returns (output, cache); the matching
backward consumes the cache and upstream gradient.  Forward and backward
both run as a small loop over kernel taps, each tap a dense matmul.
"""

from __future__ import annotations

import numpy as np


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1,
           pad: int = 1):
    """Zero-padded strided cross-correlation; output (ho, wo, c_out)."""
    h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, got {cin}")
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.tile(b, (ho, wo, 1)).astype(np.float64)
    for di in range(kh):
        for dj in range(kw):
            tap = xp[di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            y += tap @ w[di, dj]
    return y, (xp, x.shape, w, stride, pad, (ho, wo))


def conv2d_backward(dy: np.ndarray, cache):
    xp, x_shape, w, stride, pad, (ho, wo) = cache
    kh, kw = w.shape[:2]
    db = dy.sum(axis=(0, 1))
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for di in range(kh):
        for dj in range(kw):
            tap = xp[di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            dw[di, dj] = np.tensordot(tap, dy, axes=([0, 1], [0, 1]))
            dxp[di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dy @ w[di, dj].T
    if pad:
        dx = dxp[pad:pad + x_shape[0], pad:pad + x_shape[1]]
    else:
        dx = dxp
    return dx, dw, db


def conv_transpose2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2):
    """Unpadded transposed convolution; output stride*(h-1)+kh per axis."""
    h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, got {cin}")
    ho = stride * (h - 1) + kh
    wo = stride * (wd - 1) + kw
    y = np.tile(b, (ho, wo, 1)).astype(np.float64)
    for di in range(kh):
        for dj in range(kw):
            y[di:di + stride * h:stride, dj:dj + stride * wd:stride] += x @ w[di, dj]
    return y, (x, w, stride, (ho, wo))


def conv_transpose2d_backward(dy: np.ndarray, cache):
    x, w, stride, _ = cache
    h, wd = x.shape[:2]
    kh, kw = w.shape[:2]
    db = dy.sum(axis=(0, 1))
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    for di in range(kh):
        for dj in range(kw):
            tap = dy[di:di + stride * h:stride, dj:dj + stride * wd:stride]
            dw[di, dj] = np.tensordot(x, tap, axes=([0, 1], [0, 1]))
            dx += tap @ w[di, dj].T
    return dx, dw, db


def relu(x: np.ndarray):
    return np.maximum(x, 0.0), (x > 0)


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def pad_to_even(x: np.ndarray):
    """Replicate-pad bottom/right so both spatial dims are even."""
    h, w = x.shape[:2]
    ph, pw = h % 2, w % 2
    if ph or pw:
        y = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")
    else:
        y = x
    return y, (h, w)


def pad_to_even_backward(dy: np.ndarray, cache):
    h, w = cache
    dx = dy[:h, :w].copy()
    if dy.shape[0] > h:
        dx[h - 1, :] += dy[h, :w]
    if dy.shape[1] > w:
        dx[:, w - 1] += dy[:h, w]
    if dy.shape[0] > h and dy.shape[1] > w:
        dx[h - 1, w - 1] += dy[h, w]
    return dx


def crop(x: np.ndarray, oy: int, ox: int, th: int, tw: int):
    if oy + th > x.shape[0] or ox + tw > x.shape[1]:
        raise ValueError(f"crop {th}x{tw}@({oy},{ox}) exceeds input {x.shape[:2]}")
    return x[oy:oy + th, ox:ox + tw], (x.shape, oy, ox)


def crop_backward(dy: np.ndarray, cache):
    shape, oy, ox = cache
    dx = np.zeros(shape)
    dx[oy:oy + dy.shape[0], ox:ox + dy.shape[1]] = dy
    return dx


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
