"""The deeply supervised cost-volume matching loss and its exact gradients.

Per reference pixel the loss compares the softmax match distribution over
inverse-depth bins against a one-hot target at the ground-truth bin with the
full binary cross entropy (a -ln P term at the positive bin and -ln(1-P)
terms at every negative bin), and adds two squared regression penalties on
the probability-weighted inverse depth and its reciprocal.  Candidate bins
whose epipolar sample leaves the live image contribute a fixed margin cost
with zero gradient; pixels whose positive bin leaves the image are masked
out entirely.  Distances between descriptors use the squared L2 norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..features import FeatureMap, FeaturePyramid, bilinear_support_grid, downsample_nearest
from ..geometry import (CameraIntrinsics, InverseDepthGrid, Pose,
                        epipolar_sample_grid, scale_intrinsics)

PROB_FLOOR = 1e-12  # probability clamp inside the logarithms
RHO_FLOOR = 0.01    # pixels with gt inverse depth below this skip the depth term


@dataclass(frozen=True)
class LossWeights:
    """Balance of the loss terms: lambda_rho and lambda_d scale the inverse-
    depth and depth regressions, margin is the fixed out-of-image cost."""

    lambda_rho: float = 5.0
    lambda_d: float = 1.0
    margin: float = 10.0

    def __post_init__(self):
        if self.lambda_rho < 0 or self.lambda_d < 0 or self.margin < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


@dataclass(frozen=True)
class TrainingPair:
    """A reference/live image pair with relative pose and reference-frame
    inverse-depth ground truth."""

    ref_rgb: np.ndarray
    live_rgb: np.ndarray
    pose: Pose               # live-from-reference
    gt_rho: np.ndarray       # (H, W) inverse depth, meaningful where gt_valid
    gt_valid: np.ndarray     # (H, W) bool

    def __post_init__(self):
        ref = np.asarray(self.ref_rgb)
        live = np.asarray(self.live_rgb)
        rho = np.asarray(self.gt_rho, dtype=np.float64)
        valid = np.asarray(self.gt_valid, dtype=bool)
        if ref.shape != live.shape:
            raise ValueError(f"image shapes differ: {ref.shape} vs {live.shape}")
        if rho.shape != ref.shape[:2] or valid.shape != rho.shape:
            raise ValueError("ground truth must match the image plane")
        if np.any(~np.isfinite(rho[valid])) or np.any(rho[valid] < 0):
            raise ValueError("ground-truth inverse depth must be finite and nonnegative")
        object.__setattr__(self, "gt_rho", rho)
        object.__setattr__(self, "gt_valid", valid)


class MatchingGeometry:
    """Precomputed epipolar sampling structure for one (pose, intr, grid).

    Holds, for every pixel and bin, the four live-image support texels as
    flat indices, their bilinear weights, and the in-image validity.  Reused
    across training iterations since it does not depend on the features.
    """

    def __init__(self, pose: Pose, intr: CameraIntrinsics, grid: InverseDepthGrid):
        coords, valid = epipolar_sample_grid(grid, pose, intr, intr)
        # (K, H, W, ...) -> (H, W, K, ...)
        xs = np.ascontiguousarray(np.moveaxis(coords[..., 0], 0, 2))
        ys = np.ascontiguousarray(np.moveaxis(coords[..., 1], 0, 2))
        self.valid = np.ascontiguousarray(np.moveaxis(valid, 0, 2))
        self.flat_idx, self.weights = bilinear_support_grid(xs, ys, intr.width, intr.height)
        self.grid = grid
        self.shape = (intr.height, intr.width, grid.k_bins)


@dataclass
class MatchingLossResult:
    loss: float
    ce: float
    reg_rho: float
    reg_d: float
    n_valid: int
    n_clamped: int
    grad_ref: np.ndarray | None = None
    grad_live: np.ndarray | None = None


def matching_loss(f_ref: FeatureMap, f_live: FeatureMap, pose: Pose,
                  intr: CameraIntrinsics, gt_rho: np.ndarray, gt_valid: np.ndarray,
                  grid: InverseDepthGrid, weights: LossWeights = LossWeights(),
                  geom: MatchingGeometry | None = None, with_grads: bool = True,
                  allow_empty: bool = False) -> MatchingLossResult:
    """Evaluate the matching loss for one image pair at one scale.

    Returns the summed loss plus, when requested, exact gradients with
    respect to every entry of both feature maps.  ``geom`` may carry the
    cached sampling structure for this (pose, intr, grid).  Raises
    ValueError when no pixel survives masking unless ``allow_empty``.
    """
    h, w, c = f_ref.data.shape
    if f_live.data.shape != (h, w, c):
        raise ValueError(f"feature maps differ: {f_ref.data.shape} vs {f_live.data.shape}")
    if (intr.width, intr.height) != (w, h):
        raise ValueError(f"intrinsics {intr.width}x{intr.height} do not match maps {w}x{h}")
    gt_rho = np.asarray(gt_rho, dtype=np.float64)
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if gt_rho.shape != (h, w) or gt_valid.shape != (h, w):
        raise ValueError("ground truth must match the feature plane")
    if geom is None:
        geom = MatchingGeometry(pose, intr, grid)
    if geom.shape != (h, w, grid.k_bins):
        raise ValueError(f"cached geometry {geom.shape} does not match {(h, w, grid.k_bins)}")

    k = grid.k_bins
    centers = grid.centers()
    l_star = grid.nearest_bin(np.where(gt_valid, gt_rho, grid.rho_min))
    n_clamped = int(np.count_nonzero(gt_valid & (gt_rho > grid.rho_max)))

    pos_in = np.take_along_axis(geom.valid, l_star[:, :, None], axis=2)[:, :, 0]
    mask = gt_valid & pos_in
    n_valid = int(np.count_nonzero(mask))
    if n_valid == 0:
        if allow_empty:
            z = np.zeros((h, w, c)) if with_grads else None
            return MatchingLossResult(0.0, 0.0, 0.0, 0.0, 0, n_clamped, z,
                                      None if z is None else z.copy())
        raise ValueError("no pixel has a valid in-image positive match")

    flat_live = f_live.data.reshape(-1, c)
    samples = np.einsum("hwks,hwksc->hwkc", geom.weights, flat_live[geom.flat_idx])
    diff = f_ref.data[:, :, None, :] - samples          # (H, W, K, C)
    energy = np.where(geom.valid, np.einsum("hwkc,hwkc->hwk", diff, diff),
                      weights.margin)

    # stable softmax of negated costs
    z = -(energy - energy.min(axis=2, keepdims=True))
    ex = np.exp(z)
    p = ex / ex.sum(axis=2, keepdims=True)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)

    neg_terms = -np.log1p(-pc)
    p_pos = np.take_along_axis(pc, l_star[:, :, None], axis=2)[:, :, 0]
    neg_at_pos = np.take_along_axis(neg_terms, l_star[:, :, None], axis=2)[:, :, 0]
    ce_px = -np.log(p_pos) + neg_terms.sum(axis=2) - neg_at_pos

    rho_hat = p @ centers
    d_hat = 1.0 / np.maximum(rho_hat, RHO_FLOOR)
    rho_err = rho_hat - gt_rho
    d_term_on = mask & (gt_rho >= RHO_FLOOR)
    d_star = 1.0 / np.where(d_term_on, gt_rho, 1.0)
    d_err = np.where(d_term_on, d_hat - d_star, 0.0)

    ce = float(np.sum(ce_px[mask]))
    reg_rho = float(weights.lambda_rho * np.sum(rho_err[mask] ** 2))
    reg_d = float(weights.lambda_d * np.sum(d_err[d_term_on] ** 2))
    result = MatchingLossResult(ce + reg_rho + reg_d, ce, reg_rho, reg_d,
                                n_valid, n_clamped)
    if not with_grads:
        return result

    # dL/dP: cross entropy uses the clamped probabilities, so the gradient
    # vanishes where the clamp is active (consistent with the forward value)
    in_range = (p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)
    g_p = np.where(in_range, 1.0 / (1.0 - pc), 0.0)
    g_pos = np.where(
        np.take_along_axis(in_range, l_star[:, :, None], axis=2)[:, :, 0],
        -1.0 / p_pos, 0.0)
    np.put_along_axis(g_p, l_star[:, :, None], g_pos[:, :, None], axis=2)

    d_rho_hat = 2.0 * weights.lambda_rho * rho_err
    slope = np.where(rho_hat > RHO_FLOOR, -1.0 / np.maximum(rho_hat, RHO_FLOOR) ** 2, 0.0)
    d_rho_hat = d_rho_hat + 2.0 * weights.lambda_d * d_err * slope
    g_p = g_p + d_rho_hat[:, :, None] * centers[None, None, :]

    # softmax jacobian: dL/dE_k = -P_k (g_k - sum_l g_l P_l)
    s = np.einsum("hwk,hwk->hw", g_p, p)
    d_energy = -p * (g_p - s[:, :, None])
    d_energy *= mask[:, :, None]
    d_energy = np.where(geom.valid, d_energy, 0.0)

    grad_ref = np.einsum("hwk,hwkc->hwc", d_energy, 2.0 * diff)
    d_samples = d_energy[:, :, :, None] * (-2.0 * diff)     # (H, W, K, C)
    contrib = geom.weights[:, :, :, :, None] * d_samples[:, :, :, None, :]
    idx = geom.flat_idx.reshape(-1)
    vals = contrib.reshape(-1, c)
    grad_live_flat = np.empty((h * w, c))
    for ch in range(c):
        grad_live_flat[:, ch] = np.bincount(idx, weights=vals[:, ch], minlength=h * w)
    result.grad_ref = grad_ref
    result.grad_live = grad_live_flat.reshape(h, w, c)
    return result


@dataclass
class DeepLossResult:
    total: float
    taps: list[tuple[str, float]]
    grads_ref: dict[str, np.ndarray] | None
    grads_live: dict[str, np.ndarray] | None
    n_valid: int


def tap_names(pyr: FeaturePyramid) -> list[str]:
    names = [f"scale{i}" for i in range(len(pyr.levels))]
    if pyr.aggregated is not None:
        names.append("agg")
    return names


def deep_supervised_loss(pyr_ref: FeaturePyramid, pyr_live: FeaturePyramid,
                         pose: Pose, intr_full: CameraIntrinsics,
                         gt_rho: np.ndarray, gt_valid: np.ndarray,
                         grid: InverseDepthGrid, weights: LossWeights = LossWeights(),
                         tap_weights: dict[str, float] | None = None,
                         geoms: dict[str, MatchingGeometry] | None = None,
                         with_grads: bool = True) -> DeepLossResult:
    """Sum of the matching loss over every pyramid scale and the aggregated map.

    Ground truth and intrinsics are resampled per tap (nearest neighbor and
    the principal-point rule).  ``tap_weights`` maps tap names ("scale0" ...,
    "agg") to multipliers, default 1.  Raises ValueError if every tap is
    empty after masking.
    """
    if len(pyr_ref.levels) != len(pyr_live.levels):
        raise ValueError("pyramids have different depths")
    if (pyr_ref.aggregated is None) != (pyr_live.aggregated is None):
        raise ValueError("pyramids must both or neither carry an aggregated map")

    taps: list[tuple[str, FeatureMap, FeatureMap, int]] = [
        (f"scale{i}", pyr_ref.levels[i], pyr_live.levels[i], pyr_ref.factors[i])
        for i in range(len(pyr_ref.levels))
    ]
    if pyr_ref.aggregated is not None:
        taps.append(("agg", pyr_ref.aggregated, pyr_live.aggregated,
                     pyr_ref.aggregated_factor))

    total = 0.0
    per_tap = []
    grads_ref: dict[str, np.ndarray] = {}
    grads_live: dict[str, np.ndarray] = {}
    n_valid = 0
    for name, fr, fl, factor in taps:
        wgt = 1.0 if tap_weights is None else float(tap_weights.get(name, 1.0))
        intr_s = scale_intrinsics(intr_full, factor)
        gt_s = downsample_nearest(gt_rho, factor)
        gv_s = downsample_nearest(gt_valid, factor)
        geom = None if geoms is None else geoms.get(name)
        res = matching_loss(fr, fl, pose, intr_s, gt_s, gv_s, grid, weights,
                            geom=geom, with_grads=with_grads and wgt != 0.0,
                            allow_empty=True)
        n_valid += res.n_valid
        per_tap.append((name, wgt * res.loss))
        total += wgt * res.loss
        if with_grads:
            shape = fr.data.shape
            if wgt != 0.0 and res.grad_ref is not None:
                grads_ref[name] = wgt * res.grad_ref
                grads_live[name] = wgt * res.grad_live
            else:
                grads_ref[name] = np.zeros(shape)
                grads_live[name] = np.zeros(shape)
    if n_valid == 0:
        raise ValueError("no tap has any valid pixel")
    return DeepLossResult(total, per_tap,
                          grads_ref if with_grads else None,
                          grads_live if with_grads else None, n_valid)
