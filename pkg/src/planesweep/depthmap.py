"""Metric depth maps with per-pixel validity, and their 16-bit PNG form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataFormatError

DEPTH_PNG_SCALE = 5000.0  # stored value = meters * scale, 0 marks invalid


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth in meters; valid[i,j] False marks no data."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or v.shape != d.shape:
            raise ValueError(f"depth {d.shape} and valid {v.shape} must be matching 2-D arrays")
        if not np.all(np.isfinite(d[v])):
            raise ValueError("depth map has non-finite values at valid pixels")
        if np.any(d[v] < 0):
            raise ValueError("depth map has negative values at valid pixels")
        d.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def from_inverse_depth(rho: np.ndarray, valid: np.ndarray, rho_floor: float = 0.01) -> DepthMap:
    """Convert inverse depth to depth with a far-plane clamp d = 1/max(rho, floor)."""
    rho = np.asarray(rho, dtype=np.float64)
    return DepthMap(1.0 / np.maximum(rho, rho_floor), valid)


def save_depth_png(dm: DepthMap, path, scale: float = DEPTH_PNG_SCALE) -> None:
    """Write as 16-bit grayscale PNG, value = round(meters * scale), invalid = 0."""
    q = np.rint(dm.depth * scale)
    q = np.where(dm.valid, np.clip(q, 0, 65535), 0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def load_depth_png(path, scale: float = DEPTH_PNG_SCALE) -> DepthMap:
    """Read a 16-bit depth PNG; zero pixels become invalid."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise DataFormatError(f"{path}: expected single-channel depth PNG, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if arr.min() < 0 or arr.max() > 65535:
        raise DataFormatError(f"{path}: pixel values outside 16-bit range")
    return DepthMap(arr / scale, arr > 0)
