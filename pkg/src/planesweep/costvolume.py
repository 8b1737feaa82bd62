"""Multi-frame plane-sweep cost volumes and the estimators derived from them.

For every reference pixel and inverse-depth bin the volume holds the mean
descriptor distance to the corresponding epipolar samples over all live
frames whose sample lands inside the image.  Frames whose sample falls
outside are dropped from that pixel/bin's average; if no frame is usable the
entry carries ``miss_cost`` and the pixel's support count is zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .depthmap import DepthMap
from .features import FeatureMap, bilinear_support_grid, save_feature_map, load_feature_map
from .geometry import CameraIntrinsics, InverseDepthGrid, Pose, epipolar_sample_grid

DEFAULT_MISS_COST = 10.0
RHO_FLOOR = 0.01  # inverse-depth clamp when converting to metric depth (100 m cap)

_BIN_CHUNK = 32  # bins resampled per slab to bound transient memory

NORMS = ("l1", "sql2")


@dataclass(frozen=True)
class CostVolume:
    """H x W x K matching costs plus per-pixel live-frame support."""

    cost: np.ndarray
    support_count: np.ndarray
    grid: InverseDepthGrid
    miss_cost: float = DEFAULT_MISS_COST

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=np.float32)
        s = np.asarray(self.support_count, dtype=np.int32)
        if c.ndim != 3 or c.shape[2] != self.grid.k_bins:
            raise ValueError(f"cost must be H x W x {self.grid.k_bins}, got {c.shape}")
        if s.shape != c.shape[:2]:
            raise ValueError(f"support_count {s.shape} must match cost plane {c.shape[:2]}")
        if not np.all(np.isfinite(c)) or c.min() < 0:
            raise ValueError("costs must be finite and nonnegative")
        c.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "support_count", s)

    @property
    def height(self) -> int:
        return self.cost.shape[0]

    @property
    def width(self) -> int:
        return self.cost.shape[1]

    @property
    def k_bins(self) -> int:
        return self.cost.shape[2]


@dataclass(frozen=True)
class MatchDistribution:
    """Per-pixel softmax distribution over inverse-depth bins."""

    probs: np.ndarray
    grid: InverseDepthGrid

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != self.grid.k_bins:
            raise ValueError(f"probs must be H x W x {self.grid.k_bins}, got {p.shape}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)


def _frame_digest(fm: FeatureMap, pose: Pose) -> bytes:
    h = hashlib.sha256()
    h.update(pose.rotation.tobytes())
    h.update(pose.translation.tobytes())
    h.update(fm.data.tobytes())
    return h.digest()


def build_cost_volume(f_ref: FeatureMap,
                      lives: Sequence[tuple[FeatureMap, Pose]],
                      grid: InverseDepthGrid,
                      intr: CameraIntrinsics,
                      norm: str = "l1",
                      miss_cost: float = DEFAULT_MISS_COST) -> CostVolume:
    """Accumulate per-pixel per-bin descriptor distances over live frames.

    ``lives`` pairs each live feature map with the live-from-reference pose.
    ``norm`` selects the per-sample distance: "l1" (inference default) or
    "sql2" (the training-time distance).  Accumulation runs in float64 and
    in a canonical frame order (content digest), so permuting ``lives``
    yields a bit-identical volume; the result is stored float32.
    """
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
    if not lives:
        raise ValueError("need at least one live frame")
    h, w, c = f_ref.data.shape
    if (intr.width, intr.height) != (w, h):
        raise ValueError(f"intrinsics {intr.width}x{intr.height} do not match maps {w}x{h}")
    for fm, _ in lives:
        if fm.data.shape != (h, w, c):
            raise ValueError(f"live map shape {fm.data.shape} != reference {(h, w, c)}")

    ordered = sorted(lives, key=lambda lv: _frame_digest(*lv))
    k = grid.k_bins
    acc = np.zeros((k, h, w))
    cnt = np.zeros((k, h, w), dtype=np.int32)
    ref = f_ref.data[None, :, :, :]  # (1, H, W, C)

    for fm, pose in ordered:
        coords, valid = epipolar_sample_grid(grid, pose, intr, intr)
        flat = fm.data.reshape(-1, c)
        for lo in range(0, k, _BIN_CHUNK):
            hi = min(lo + _BIN_CHUNK, k)
            idx, wgt = bilinear_support_grid(
                coords[lo:hi, ..., 0], coords[lo:hi, ..., 1], w, h)
            samples = np.einsum("khws,khwsc->khwc", wgt, flat[idx])
            diff = samples - ref
            if norm == "l1":
                dist = np.abs(diff).sum(axis=-1)
            else:
                dist = (diff * diff).sum(axis=-1)
            v = valid[lo:hi]
            acc[lo:hi] += np.where(v, dist, 0.0)
            cnt[lo:hi] += v

    cost = np.where(cnt > 0, acc / np.maximum(cnt, 1), miss_cost)
    return CostVolume(
        cost=np.transpose(cost, (1, 2, 0)).astype(np.float32),
        support_count=cnt.min(axis=0),
        grid=grid,
        miss_cost=miss_cost,
    )


def softmax_distribution(cv: CostVolume) -> MatchDistribution:
    """Per-pixel softmax of negated costs (max-subtracted, float64)."""
    c = cv.cost.astype(np.float64)
    z = -(c - c.min(axis=2, keepdims=True))
    e = np.exp(z)
    return MatchDistribution(e / e.sum(axis=2, keepdims=True), cv.grid)


def expected_inverse_depth(dist: MatchDistribution,
                           grid: InverseDepthGrid | None = None,
                           rho_floor: float = RHO_FLOOR):
    """Probability-weighted inverse depth and its clamped metric depth.

    Returns ``(rho_hat, depth_hat)`` with rho_hat the per-pixel dot product
    of bin centers and probabilities and depth_hat = 1/max(rho_hat, floor).
    """
    g = dist.grid if grid is None else grid
    rho_hat = dist.probs @ g.centers()
    return rho_hat, 1.0 / np.maximum(rho_hat, rho_floor)


def winner_take_all_bins(cv: CostVolume):
    """Per-pixel argmin bin (ties to the smallest index) and validity mask."""
    return np.argmin(cv.cost, axis=2), cv.support_count > 0


def winner_take_all(cv: CostVolume, rho_floor: float = RHO_FLOOR) -> DepthMap:
    """Minimum-cost depth per pixel; pixels with zero support are invalid."""
    bins, valid = winner_take_all_bins(cv)
    rho = cv.grid.centers()[bins]
    return DepthMap(1.0 / np.maximum(rho, rho_floor), valid)


def wta_accuracy(cv: CostVolume, gt_rho: np.ndarray, mask: np.ndarray,
                 tol_bins: int = 1) -> float:
    """Fraction of masked, supported pixels whose argmin bin lies within
    tol_bins of the ground-truth bin."""
    bins, supported = winner_take_all_bins(cv)
    m = np.asarray(mask, dtype=bool) & supported
    if not m.any():
        raise ValueError("no pixel to score")
    gt_bins = cv.grid.nearest_bin(np.asarray(gt_rho, dtype=np.float64))
    return float(np.mean(np.abs(bins[m] - gt_bins[m]) <= tol_bins))


def cost_curve(cv: CostVolume, pixel) -> np.ndarray:
    """The K per-bin costs at one pixel, as float64."""
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < cv.width and 0 <= y < cv.height):
        raise ValueError(f"pixel {(x, y)} outside {cv.width}x{cv.height} volume")
    return cv.cost[y, x].astype(np.float64)


def save_cost_curve_csv(grid: InverseDepthGrid, costs: np.ndarray, path) -> None:
    """Write one pixel's matching-error curve as "rho,cost" rows."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("rho,cost\n")
        for rho, cost in zip(grid.centers(), costs):
            f.write(f"{float(rho)!r},{float(cost)!r}\n")


def save_cost_volume(cv: CostVolume, path) -> None:
    """Dump the raw volume in the feature-map container (channels = k_bins)."""
    save_feature_map(FeatureMap(cv.cost.astype(np.float64)), path)


def load_cost_volume(path, grid: InverseDepthGrid,
                     miss_cost: float = DEFAULT_MISS_COST) -> CostVolume:
    """Read a volume dumped by :func:`save_cost_volume`.

    Support counts are not stored in the container; pixels whose every bin
    carries ``miss_cost`` are marked unsupported, all others get support 1.
    """
    fm = load_feature_map(path)
    cost = fm.data
    missed = np.all(cost.astype(np.float32) == np.float32(miss_cost), axis=2)
    return CostVolume(cost, np.where(missed, 0, 1).astype(np.int32), grid, miss_cost)
