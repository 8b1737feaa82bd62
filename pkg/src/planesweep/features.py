"""Dense per-pixel descriptor maps, bilinear sampling, and the map file format.

A :class:`FeatureMap` is any H x W x C grid of real values: raw mean-subtracted
RGB, maps loaded from disk, or the output of the trainable extractor.  All
consumers treat them identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

FEATURE_MAGIC = b"FMAP"


@dataclass(frozen=True)
class FeatureMap:
    """Immutable H x W x C descriptor grid (float64 in memory)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"feature map must be H x W x C, got shape {d.shape}")
        if min(d.shape) < 1:
            raise ValueError(f"feature map dimensions must be positive, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map contains non-finite values")
        d = np.ascontiguousarray(d)
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-scale descriptor maps (half resolution each level, rounding up),
    plus the optional aggregated map at the finest level's resolution."""

    levels: tuple[FeatureMap, ...]
    factors: tuple[int, ...]
    aggregated: FeatureMap | None = None

    def __post_init__(self):
        if len(self.levels) != len(self.factors) or not self.levels:
            raise ValueError("levels and factors must align and be nonempty")
        for i in range(1, len(self.levels)):
            prev, cur = self.levels[i - 1], self.levels[i]
            if cur.height != -(-prev.height // 2) or cur.width != -(-prev.width // 2):
                raise ValueError(
                    f"level {i} is {cur.height}x{cur.width}, expected half of "
                    f"{prev.height}x{prev.width} rounded up")
            if cur.channels != prev.channels:
                raise ValueError("pyramid levels must share a channel count")
            if self.factors[i] != 2 * self.factors[i - 1]:
                raise ValueError("pyramid factors must double per level")
        if self.aggregated is not None:
            f0 = self.levels[0]
            if (self.aggregated.height, self.aggregated.width) != (f0.height, f0.width):
                raise ValueError("aggregated map must match the finest level's size")

    @property
    def aggregated_factor(self) -> int:
        return self.factors[0]


def rgb_features(image: np.ndarray, mean) -> FeatureMap:
    """Raw photometric descriptors: per-channel mean subtraction, no rescaling.

    ``image`` is H x W x 3 with values in 0..255; ``mean`` is the per-channel
    training-set mean and must be supplied explicitly.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    m = np.asarray(mean, dtype=np.float64).reshape(3)
    return FeatureMap(img - m)


def _footprint(x: float, y: float, width: int, height: int):
    """Support texels and fractional offsets for one in-bounds coordinate.

    The exact border coordinate (width-1 or height-1) degenerates to a
    2-texel blend with full weight on the border texel, keeping the valid
    sampling domain closed.
    """
    x0 = 0 if width == 1 else min(int(np.floor(x)), width - 2)
    y0 = 0 if height == 1 else min(int(np.floor(y)), height - 2)
    return x0, y0, x - x0, y - y0


def sample_bilinear(fm: FeatureMap, u) -> np.ndarray:
    """Bilinear blend of the four texels around sub-pixel coordinate u.

    Exact at integer coordinates.  Raises ValueError outside the closed
    domain [0, width-1] x [0, height-1]; callers decide bounds policy.
    """
    x, y = float(u[0]), float(u[1])
    if not (0.0 <= x <= fm.width - 1 and 0.0 <= y <= fm.height - 1):
        raise ValueError(f"sample coordinate {(x, y)} outside {fm.width}x{fm.height} map")
    x0, y0, wx, wy = _footprint(x, y, fm.width, fm.height)
    d = fm.data
    x1, y1 = min(x0 + 1, fm.width - 1), min(y0 + 1, fm.height - 1)
    return ((1 - wy) * ((1 - wx) * d[y0, x0] + wx * d[y0, x1])
            + wy * ((1 - wx) * d[y1, x0] + wx * d[y1, x1]))


def sample_bilinear_grad(fm: FeatureMap, u):
    """Bilinear sample plus its gradient with respect to the support texels.

    Returns ``(value, texels, weights)`` where texels is a list of four
    (y, x) indices and weights are the matching bilinear coefficients
    (nonnegative, summing to one); d(value[c])/d(texel[c]) == weight.
    """
    x, y = float(u[0]), float(u[1])
    if not (0.0 <= x <= fm.width - 1 and 0.0 <= y <= fm.height - 1):
        raise ValueError(f"sample coordinate {(x, y)} outside {fm.width}x{fm.height} map")
    x0, y0, wx, wy = _footprint(x, y, fm.width, fm.height)
    x1, y1 = min(x0 + 1, fm.width - 1), min(y0 + 1, fm.height - 1)
    texels = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    weights = np.array([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    d = fm.data
    value = (weights[0] * d[y0, x0] + weights[1] * d[y0, x1]
             + weights[2] * d[y1, x0] + weights[3] * d[y1, x1])
    return value, texels, weights


def bilinear_support_grid(xs: np.ndarray, ys: np.ndarray, width: int, height: int):
    """Vectorized footprint for arrays of coordinates.

    Returns ``(flat_idx, weights)``: flat_idx has shape xs.shape + (4,) with
    row-major texel indices (y * width + x) and weights the matching bilinear
    coefficients.  Coordinates are clipped into the valid domain first, so
    out-of-bounds entries produce legal indices; callers mask them separately.
    """
    xc = np.clip(xs, 0.0, width - 1)
    yc = np.clip(ys, 0.0, height - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(height - 2, 0))
    wx = xc - x0
    wy = yc - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    flat_idx = np.stack(
        [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=-1)
    weights = np.stack(
        [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=-1)
    return flat_idx, weights


def sample_bilinear_grid(fm: FeatureMap, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples at arrays of coordinates; shape xs.shape + (C,).

    Coordinates are clipped into the valid domain (no bounds error); use the
    scalar :func:`sample_bilinear` when strict bounds checking is wanted.
    """
    flat_idx, w = bilinear_support_grid(xs, ys, fm.width, fm.height)
    flat = fm.data.reshape(-1, fm.channels)
    return np.einsum("...s,...sc->...c", w, flat[flat_idx])


def downsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample of the two leading axes by a power of two.

    Target pixel i reads source index floor((i + 0.5) * factor), clipped;
    this matches the principal-point rescaling convention.  Output dims
    round up, mirroring replicate padding of odd inputs.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a positive power of two, got {factor}")
    if factor == 1:
        return arr
    h, w = arr.shape[:2]
    th, tw = -(-h // factor), -(-w // factor)
    ri = np.minimum(((np.arange(th) + 0.5) * factor).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(tw) + 0.5) * factor).astype(np.int64), w - 1)
    return arr[np.ix_(ri, ci)]


def downsample_bilinear(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resample of an H x W x C array onto a coarser grid.

    Destination pixel centers map to source coordinates with the
    (i + 0.5) * scale - 0.5 rule, clamped at the borders.
    """
    h, w = img.shape[:2]
    sy = h / target_h
    sx = w / target_w
    ys = np.clip((np.arange(target_h) + 0.5) * sy - 0.5, 0, h - 1)
    xs = np.clip((np.arange(target_w) + 0.5) * sx - 0.5, 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    a = np.asarray(img, dtype=np.float64)
    top = (1 - wx) * a[np.ix_(y0, x0)] + wx * a[np.ix_(y0, x1)]
    bot = (1 - wx) * a[np.ix_(y1, x0)] + wx * a[np.ix_(y1, x1)]
    return (1 - wy) * top + wy * bot


def save_feature_map(fm: FeatureMap, path) -> None:
    """Write a map as magic + u32 width/height/channels + float32 payload.

    Payload is row-major, channel-fastest, little-endian.  Values are
    truncated to float32; maps whose values are float32-representable
    round-trip bit-exactly.
    """
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", fm.width, fm.height, fm.channels))
        f.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def load_feature_map(path) -> FeatureMap:
    """Read a map written by :func:`save_feature_map`; strict about size."""
    with open(path, "rb") as f:
        blob = f.read()
    hdr = len(FEATURE_MAGIC) + 12
    if len(blob) < hdr or blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: not a feature map file")
    w, h, c = struct.unpack_from("<III", blob, len(FEATURE_MAGIC))
    if w < 1 or h < 1 or c < 1:
        raise DataFormatError(f"{path}: bad dimensions {w}x{h}x{c}")
    expected = hdr + 4 * w * h * c
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(blob) - hdr} bytes, header implies {expected - hdr}")
    data = np.frombuffer(blob, dtype="<f4", offset=hdr).reshape(h, w, c)
    if not np.all(np.isfinite(data)):
        raise DataFormatError(f"{path}: payload contains non-finite values")
    return FeatureMap(data.astype(np.float64))
