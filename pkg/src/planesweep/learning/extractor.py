"""A small multi-scale convolutional descriptor extractor.

Each block is three 3x3 convolutions (first one stride 2, first two followed
by a rectifier); block inputs beyond the first concatenate the previous
block's features with a bilinearly downscaled copy of the input image.  The
coarse outputs are upsampled by learnable 5x5 stride-2 transposed
convolutions and summed into the finer ones, so the aggregated map carries
both context and fine detail.  Forward and backward are exact and
deterministic; no framework involved.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import DataFormatError
from ..features import FeatureMap, FeaturePyramid, downsample_bilinear
from . import layers

logger = logging.getLogger(__name__)

EXTRACTOR_MAGIC = b"FEXT"
EXTRACTOR_VERSION = 1

_CONV_K = 3
_UP_K = 5


@dataclass(frozen=True)
class ExtractorConfig:
    """Architecture sizes; channels is constant across blocks.

    ``init_scale`` multiplies the Xavier limits at initialization only; on
    raw 0..255 images a gain below 1 keeps the initial descriptor distances
    small enough that the match distribution starts unsaturated.
    """

    blocks: int = 3
    channels: int = 8
    in_channels: int = 3
    init_scale: float = 1.0

    def __post_init__(self):
        if self.blocks < 1 or self.channels < 1 or self.in_channels < 1:
            raise ValueError(f"invalid extractor config {self}")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")

    def level_dims(self, height: int, width: int) -> list[tuple[int, int]]:
        """Spatial dims of each block output for a given input size."""
        dims = []
        h, w = height, width
        for _ in range(self.blocks):
            h, w = -(-h // 2), -(-w // 2)
            dims.append((h, w))
        return dims

    def factors(self) -> list[int]:
        return [2 ** (b + 1) for b in range(self.blocks)]


@dataclass
class ExtractorParams:
    """Learnable arrays plus the per-channel input mean baked in at init."""

    config: ExtractorConfig
    mean: np.ndarray                                  # (in_channels,)
    blocks: list[list[tuple[np.ndarray, np.ndarray]]]  # [block][layer] -> (W, b)
    ups: list[tuple[np.ndarray, np.ndarray]]           # [level] -> (W, b), level+1 -> level

    def arrays(self) -> list[np.ndarray]:
        """All learnable arrays in canonical order (mean excluded)."""
        out = []
        for blk in self.blocks:
            for w, b in blk:
                out.extend((w, b))
        for w, b in self.ups:
            out.extend((w, b))
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())


def zero_grads(params: ExtractorParams) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in params.arrays()]


def init_extractor(config: ExtractorConfig, rng: np.random.Generator,
                   mean=(0.0, 0.0, 0.0)) -> ExtractorParams:
    """Xavier-uniform weights, zero biases, deterministic given the generator."""
    c = config.channels
    blocks = []
    for b in range(config.blocks):
        cin = config.in_channels if b == 0 else c + config.in_channels
        layer_list = []
        for layer in range(3):
            ci = cin if layer == 0 else c
            fan_in = _CONV_K * _CONV_K * ci
            fan_out = _CONV_K * _CONV_K * c
            w = config.init_scale * layers.xavier_uniform(
                (_CONV_K, _CONV_K, ci, c), fan_in, fan_out, rng)
            layer_list.append((w, np.zeros(c)))
        blocks.append(layer_list)
    ups = []
    for _ in range(config.blocks - 1):
        fan = _UP_K * _UP_K * c
        w = config.init_scale * layers.xavier_uniform((_UP_K, _UP_K, c, c), fan, fan, rng)
        ups.append((w, np.zeros(c)))
    params = ExtractorParams(config, np.asarray(mean, dtype=np.float64).reshape(config.in_channels),
                             blocks, ups)
    logger.info("initialized extractor: %d blocks, %d channels, %d parameters",
                config.blocks, config.channels, params.param_count())
    return params


def extractor_forward(params: ExtractorParams, image: np.ndarray,
                      want_cache: bool = False):
    """Run the extractor on a raw image (0..255 values, mean subtracted here).

    Returns ``(pyramid, cache)``; the pyramid holds one map per block plus
    the aggregated map at the finest block's resolution.  ``cache`` is None
    unless requested.
    """
    img = np.asarray(image, dtype=np.float64) - params.mean
    cfg = params.config
    feats = []
    block_caches = []
    prev = None
    for b in range(cfg.blocks):
        if b == 0:
            x_in = img
            ds = None
        else:
            ds = downsample_bilinear(img, prev.shape[0], prev.shape[1])
            x_in = np.concatenate([prev, ds], axis=2)
        xp, pad_cache = layers.pad_to_even(x_in)
        (w1, b1), (w2, b2), (w3, b3) = params.blocks[b]
        y1, c1 = layers.conv2d(xp, w1, b1, stride=2, pad=1)
        a1, r1 = layers.relu(y1)
        y2, c2 = layers.conv2d(a1, w2, b2, stride=1, pad=1)
        a2, r2 = layers.relu(y2)
        y3, c3 = layers.conv2d(a2, w3, b3, stride=1, pad=1)
        margin = min(float(np.abs(y1).min()), float(np.abs(y2).min()))
        feats.append(y3)
        block_caches.append((pad_cache, c1, r1, c2, r2, c3, x_in.shape, margin))
        prev = y3

    agg = feats[-1]
    up_caches = [None] * max(cfg.blocks - 1, 0)
    crop_caches = [None] * max(cfg.blocks - 1, 0)
    for b in range(cfg.blocks - 2, -1, -1):
        wu, bu = params.ups[b]
        u, cu = layers.conv_transpose2d(agg, wu, bu, stride=2)
        uc, cc = layers.crop(u, 2, 2, feats[b].shape[0], feats[b].shape[1])
        up_caches[b] = cu
        crop_caches[b] = cc
        agg = feats[b] + uc

    pyramid = FeaturePyramid(
        levels=tuple(FeatureMap(f) for f in feats),
        factors=tuple(cfg.factors()),
        aggregated=FeatureMap(agg),
    )
    cache = (block_caches, up_caches, crop_caches, [f.shape for f in feats]) if want_cache else None
    return pyramid, cache


def extractor_backward(params: ExtractorParams, cache,
                       d_levels: list[np.ndarray | None],
                       d_aggregated: np.ndarray | None) -> list[np.ndarray]:
    """Parameter gradients for upstream gradients on the pyramid outputs.

    ``d_levels`` aligns with the block outputs; missing entries count as
    zero.  Returns gradients in the canonical :meth:`ExtractorParams.arrays`
    order.  Gradients with respect to the input image are discarded.
    """
    cfg = params.config
    block_caches, up_caches, crop_caches, feat_shapes = cache
    if len(d_levels) != cfg.blocks:
        raise ValueError(f"expected {cfg.blocks} level gradients, got {len(d_levels)}")
    d_feats = [np.zeros(s) if g is None else np.array(g, dtype=np.float64, copy=True)
               for s, g in zip(feat_shapes, d_levels)]
    for s, g in zip(feat_shapes, d_feats):
        if g.shape != s:
            raise ValueError(f"level gradient shape {g.shape} does not match forward {s}")

    g_blocks = [[(np.zeros_like(w), np.zeros_like(b)) for (w, b) in blk]
                for blk in params.blocks]
    g_ups = [(np.zeros_like(w), np.zeros_like(b)) for (w, b) in params.ups]

    # aggregation chain: d_agg flows into each fine level and, through the
    # learned upsamplers, into the coarser aggregate
    if d_aggregated is not None:
        da = np.asarray(d_aggregated, dtype=np.float64)
        if da.shape != feat_shapes[0]:
            raise ValueError(
                f"aggregated gradient shape {da.shape} does not match forward {feat_shapes[0]}")
        for b in range(cfg.blocks - 1):
            d_feats[b] += da
            du = layers.crop_backward(da, crop_caches[b])
            da, dwu, dbu = layers.conv_transpose2d_backward(du, up_caches[b])
            g_ups[b] = (g_ups[b][0] + dwu, g_ups[b][1] + dbu)
        d_feats[cfg.blocks - 1] += da

    # blocks, coarse to fine, so concat gradients reach the finer block first
    for b in range(cfg.blocks - 1, -1, -1):
        pad_cache, c1, r1, c2, r2, c3, in_shape, _ = block_caches[b]
        dy3 = d_feats[b]
        da2, dw3, db3 = layers.conv2d_backward(dy3, c3)
        dy2 = layers.relu_backward(da2, r2)
        da1, dw2, db2 = layers.conv2d_backward(dy2, c2)
        dy1 = layers.relu_backward(da1, r1)
        dxp, dw1, db1 = layers.conv2d_backward(dy1, c1)
        dx_in = layers.pad_to_even_backward(dxp, pad_cache)
        gb = g_blocks[b]
        g_blocks[b] = [
            (gb[0][0] + dw1, gb[0][1] + db1),
            (gb[1][0] + dw2, gb[1][1] + db2),
            (gb[2][0] + dw3, gb[2][1] + db3),
        ]
        if b > 0:
            d_feats[b - 1] += dx_in[:, :, :cfg.channels]  # image part discarded

    out = []
    for blk in g_blocks:
        for w, b in blk:
            out.extend((w, b))
    for w, b in g_ups:
        out.extend((w, b))
    return out


def relu_margin(cache) -> float:
    """Smallest |pre-activation| seen by any rectifier in a cached forward.

    Finite-difference probes of the parameters are only trustworthy when no
    rectifier input sits within the probe's reach of zero; this reports how
    close the forward came.
    """
    block_caches = cache[0]
    return min(bc[-1] for bc in block_caches)


def save_extractor(params: ExtractorParams, path) -> None:
    """Versioned binary container: magic, version, sizes, mean, float32 arrays."""
    cfg = params.config
    with open(path, "wb") as f:
        f.write(EXTRACTOR_MAGIC)
        f.write(struct.pack("<IIII", EXTRACTOR_VERSION, cfg.blocks, cfg.channels,
                            cfg.in_channels))
        f.write(np.asarray(params.mean, dtype="<f4").tobytes())
        for a in params.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_extractor(path) -> ExtractorParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != EXTRACTOR_MAGIC:
        raise DataFormatError(f"{path}: not an extractor parameter file")
    version, blocks, channels, in_channels = struct.unpack_from("<IIII", blob, 4)
    if version != EXTRACTOR_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    try:
        cfg = ExtractorConfig(blocks, channels, in_channels)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from e
    off = 20
    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        end = off + 4 * n
        if end > len(blob):
            raise DataFormatError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off = end
        return arr.astype(np.float64)

    mean = take((in_channels,))
    blocks_list = []
    for b in range(cfg.blocks):
        cin = in_channels if b == 0 else channels + in_channels
        blk = []
        for layer in range(3):
            ci = cin if layer == 0 else channels
            blk.append((take((_CONV_K, _CONV_K, ci, channels)), take((channels,))))
        blocks_list.append(blk)
    ups = []
    for _ in range(cfg.blocks - 1):
        ups.append((take((_UP_K, _UP_K, channels, channels)), take((channels,))))
    if off != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return ExtractorParams(cfg, mean, blocks_list, ups)
