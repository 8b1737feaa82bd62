"""Minibatch training of the descriptor extractor against the matching loss.

One iteration samples a training pair, runs the shared-weight extractor on
both images, evaluates the deeply supervised loss, backpropagates into the
parameters, and applies a clipped momentum step.  Everything is seeded and
single-threaded, so identical configs give bit-identical histories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from ..geometry import InverseDepthGrid, CameraIntrinsics, scale_intrinsics
from ..features import downsample_nearest
from .extractor import (ExtractorConfig, ExtractorParams, extractor_backward,
                        extractor_forward, init_extractor, zero_grads)
from .loss import (LossWeights, MatchingGeometry, TrainingPair,
                   deep_supervised_loss, tap_names)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    extractor: ExtractorConfig = ExtractorConfig()
    grid: InverseDepthGrid = InverseDepthGrid(k_bins=32, rho_min=0.0, rho_max=4.0)
    weights: LossWeights = LossWeights()
    iters: int = 500
    step: float = 2e-5
    momentum: float = 0.9
    clip_norm: float = 10.0
    seed: int = 0
    tap_weights: dict[str, float] | None = None

    def __post_init__(self):
        if self.iters < 1 or self.step <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training config {self}")


@dataclass
class TrainResult:
    params: ExtractorParams
    history: list[tuple[int, str, float]]  # (iteration, tap, loss)


def _dataset_mean(pairs: list[TrainingPair]) -> np.ndarray:
    acc = np.zeros(3)
    n = 0
    for p in pairs:
        acc += p.ref_rgb.reshape(-1, 3).sum(axis=0)
        acc += p.live_rgb.reshape(-1, 3).sum(axis=0)
        n += p.ref_rgb.shape[0] * p.ref_rgb.shape[1] + p.live_rgb.shape[0] * p.live_rgb.shape[1]
    return acc / n


def _prepare_geometry(pair: TrainingPair, cfg: TrainConfig, intr: CameraIntrinsics):
    """Per-tap cached epipolar sampling structures for one pair."""
    geoms = {}
    factors = cfg.extractor.factors()
    for i, f in enumerate(factors):
        geoms[f"scale{i}"] = MatchingGeometry(pair.pose, scale_intrinsics(intr, f), cfg.grid)
    if cfg.extractor.blocks >= 1:
        geoms["agg"] = geoms["scale0"]
    return geoms


def train(pairs: list[TrainingPair], cfg: TrainConfig,
          intr: CameraIntrinsics) -> TrainResult:
    """Train from scratch on the given pairs; deterministic given cfg.seed."""
    if not pairs:
        raise ValueError("need at least one training pair")
    h, w = pairs[0].ref_rgb.shape[:2]
    for p in pairs:
        if p.ref_rgb.shape[:2] != (h, w):
            raise ValueError("all training pairs must share image dimensions")
    if (intr.width, intr.height) != (w, h):
        raise ValueError(f"intrinsics {intr.width}x{intr.height} do not match images {w}x{h}")

    rng = np.random.default_rng(cfg.seed)
    mean = _dataset_mean(pairs)
    params = init_extractor(cfg.extractor, rng, mean)
    geoms = [_prepare_geometry(p, cfg, intr) for p in pairs]

    arrays = params.arrays()
    velocity = [np.zeros_like(a) for a in arrays]
    history: list[tuple[int, str, float]] = []

    for it in range(cfg.iters):
        pi = int(rng.integers(0, len(pairs)))
        pair = pairs[pi]
        pyr_ref, cache_ref = extractor_forward(params, pair.ref_rgb, want_cache=True)
        pyr_live, cache_live = extractor_forward(params, pair.live_rgb, want_cache=True)
        res = deep_supervised_loss(pyr_ref, pyr_live, pair.pose, intr,
                                   pair.gt_rho, pair.gt_valid, cfg.grid,
                                   cfg.weights, cfg.tap_weights, geoms[pi])
        if not np.isfinite(res.total):
            raise NumericalError(
                f"loss diverged at iteration {it}: total={res.total!r}, "
                f"per-tap={res.taps!r}")

        names = tap_names(pyr_ref)
        d_levels_ref = [res.grads_ref[n] for n in names if n.startswith("scale")]
        d_levels_live = [res.grads_live[n] for n in names if n.startswith("scale")]
        g_ref = extractor_backward(params, cache_ref, d_levels_ref,
                                   res.grads_ref.get("agg"))
        g_live = extractor_backward(params, cache_live, d_levels_live,
                                    res.grads_live.get("agg"))
        grads = [a + b for a, b in zip(g_ref, g_live)]

        gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if not np.isfinite(gnorm):
            raise NumericalError(f"gradient diverged at iteration {it} (norm={gnorm!r})")
        scale = cfg.clip_norm / gnorm if gnorm > cfg.clip_norm else 1.0

        for a, v, g in zip(arrays, velocity, grads):
            v *= cfg.momentum
            v -= cfg.step * scale * g
            a += v

        for name, value in res.taps:
            history.append((it, name, value))
        history.append((it, "total", res.total))

    logger.info("trained %d iterations on %d pairs; final total loss %.6g",
                cfg.iters, len(pairs), history[-1][2])
    return TrainResult(params, history)


def save_history_csv(history: list[tuple[int, str, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter,tap,loss\n")
        for it, tap, loss in history:
            f.write(f"{it},{tap},{loss!r}\n")
