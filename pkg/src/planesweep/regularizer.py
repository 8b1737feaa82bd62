"""Variational refinement of a cost volume into a smooth inverse-depth field.

Minimizes   E(rho) = sum_p data_weight * E_phi(rho_p) + huber(grad rho_p)
with data_weight = cost_scale / lambda.  The solver alternates a first-order
primal-dual step on the smooth field (Huber total variation plus a quadratic
coupling) with a per-pixel exhaustive search over the cost volume refined by
a single parabola fit, while the coupling theta tightens geometrically.  A
proposal is only adopted when it does not increase the recorded energy, so
the energy trace is non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .costvolume import CostVolume, softmax_distribution, winner_take_all_bins
from .depthmap import DepthMap
from .errors import NumericalError
from .metrics import DepthMetrics, evaluate


@dataclass(frozen=True)
class RegularizerConfig:
    """Solver knobs; ``lam`` is the regularization strength (data term is
    divided by it), ``cost_scale`` rescales descriptor costs whose magnitude
    differs from raw photometric costs."""

    lam: float = 1.0
    huber_eps: float = 1e-2
    max_outer_iters: int = 60
    theta_start: float = 0.2
    theta_end: float = 1e-4
    theta_decay: float = 0.85
    tolerance: float = 1e-8
    n_inner: int = 12
    cost_scale: float = 1.0
    rho_floor: float = 0.01

    def __post_init__(self):
        if self.lam <= 0 or self.huber_eps <= 0 or self.max_outer_iters < 1:
            raise ValueError(f"invalid regularizer config {self}")
        if not (0 < self.theta_decay < 1 and 0 < self.theta_end <= self.theta_start):
            raise ValueError(f"invalid theta schedule in {self}")


@dataclass(frozen=True)
class InverseDepthField:
    """Refined per-pixel inverse depth with a match-sharpness confidence."""

    values: np.ndarray       # (H, W) inverse depth inside the grid range
    confidence: np.ndarray   # (H, W) in (0, 1]: peak softmax probability

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        c = np.asarray(self.confidence, dtype=np.float64)
        if v.ndim != 2 or c.shape != v.shape:
            raise ValueError("values and confidence must be matching 2-D arrays")
        if not np.all(np.isfinite(v)):
            raise ValueError("inverse-depth field has non-finite values")
        v.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "confidence", c)

    def depth_map(self, rho_floor: float = 0.01) -> DepthMap:
        return DepthMap(1.0 / np.maximum(self.values, rho_floor),
                        np.ones(self.values.shape, dtype=bool))


@dataclass(frozen=True)
class RegularizerResult:
    field: InverseDepthField
    energies: np.ndarray     # recorded total energy per outer iteration


def _grad(d: np.ndarray):
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, :-1] = d[:, 1:] - d[:, :-1]
    gy[:-1, :] = d[1:, :] - d[:-1, :]
    return gx, gy


def _div(px: np.ndarray, py: np.ndarray):
    out = np.zeros_like(px)
    out[:, :-1] += px[:, :-1]
    out[:, 1:] -= px[:, :-1]
    out[:-1, :] += py[:-1, :]
    out[1:, :] -= py[:-1, :]
    return out


def _huber_energy(d: np.ndarray, eps: float) -> float:
    gx, gy = _grad(d)
    mag = np.sqrt(gx * gx + gy * gy)
    val = np.where(mag <= eps, mag * mag / (2 * eps), mag - eps / 2)
    return float(val.sum())


def _data_cost(cost64: np.ndarray, rho: np.ndarray, grid) -> np.ndarray:
    """Piecewise-linear interpolation of the per-bin costs at continuous rho."""
    pos = (rho - grid.rho_min) / grid.bin_width
    pos = np.clip(pos, 0.0, grid.k_bins - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, grid.k_bins - 2)
    frac = pos - i0
    c0 = np.take_along_axis(cost64, i0[:, :, None], axis=2)[:, :, 0]
    c1 = np.take_along_axis(cost64, (i0 + 1)[:, :, None], axis=2)[:, :, 0]
    return (1 - frac) * c0 + frac * c1


def _total_energy(cost64: np.ndarray, d: np.ndarray, grid, data_weight: float,
                  eps: float) -> float:
    return float((data_weight * _data_cost(cost64, d, grid)).sum()) + _huber_energy(d, eps)


def _search_step(cost64: np.ndarray, d: np.ndarray, grid, data_weight: float,
                 theta: float) -> np.ndarray:
    """Per-pixel exhaustive minimization of coupling + data over the bins,
    refined by one parabola fit around the discrete minimum."""
    centers = grid.centers()
    obj = data_weight * cost64 + (d[:, :, None] - centers[None, None, :]) ** 2 / (2 * theta)
    amin = np.argmin(obj, axis=2)
    a = centers[amin]

    interior = (amin > 0) & (amin < grid.k_bins - 1)
    il = np.clip(amin - 1, 0, grid.k_bins - 1)
    ir = np.clip(amin + 1, 0, grid.k_bins - 1)
    fl = np.take_along_axis(obj, il[:, :, None], axis=2)[:, :, 0]
    f0 = np.take_along_axis(obj, amin[:, :, None], axis=2)[:, :, 0]
    fr = np.take_along_axis(obj, ir[:, :, None], axis=2)[:, :, 0]
    denom = fl - 2 * f0 + fr
    safe = interior & (denom > 1e-18)
    offset = np.where(safe, 0.5 * (fl - fr) / np.where(safe, denom, 1.0), 0.0)
    offset = np.clip(offset, -1.0, 1.0)
    return np.clip(a + offset * grid.bin_width, grid.rho_min, grid.rho_max)


def minimize_energy(cv: CostVolume, cfg: RegularizerConfig = RegularizerConfig()) -> RegularizerResult:
    """Refine the cost volume's depth estimate; returns the smooth field and
    the (non-increasing) recorded energy per outer iteration."""
    cost64 = cv.cost.astype(np.float64)
    grid = cv.grid
    data_weight = cfg.cost_scale / cfg.lam

    bins, _ = winner_take_all_bins(cv)
    d = grid.centers()[bins].astype(np.float64)
    a = d.copy()
    px = np.zeros_like(d)
    py = np.zeros_like(d)
    sigma = tau = 1.0 / np.sqrt(8.0)

    conf = softmax_distribution(cv).probs.max(axis=2)

    energy = _total_energy(cost64, d, grid, data_weight, cfg.huber_eps)
    if not np.isfinite(energy):
        raise NumericalError(f"initial energy is not finite: {energy!r}")
    energies = [energy]

    theta = cfg.theta_start
    for it in range(cfg.max_outer_iters):
        # proposal: n_inner primal-dual sweeps on huber-TV + (1/2theta)(d-a)^2
        dp = d.copy()
        pxp, pyp = px.copy(), py.copy()
        d_bar = dp.copy()
        for _ in range(cfg.n_inner):
            gx, gy = _grad(d_bar)
            pxp = (pxp + sigma * gx) / (1.0 + sigma * cfg.huber_eps)
            pyp = (pyp + sigma * gy) / (1.0 + sigma * cfg.huber_eps)
            mag = np.maximum(1.0, np.sqrt(pxp * pxp + pyp * pyp))
            pxp /= mag
            pyp /= mag
            d_old = dp
            dp = (dp + tau * _div(pxp, pyp) + (tau / theta) * a) / (1.0 + tau / theta)
            dp = np.clip(dp, grid.rho_min, grid.rho_max)
            d_bar = 2.0 * dp - d_old
        ap = _search_step(cost64, dp, grid, data_weight, theta)

        e_new = _total_energy(cost64, dp, grid, data_weight, cfg.huber_eps)
        if not np.isfinite(e_new):
            raise NumericalError(
                f"energy became non-finite at outer iteration {it} (theta={theta:g})")
        if e_new <= energy:
            d, a, px, py = dp, ap, pxp, pyp
            converged = energy - e_new <= cfg.tolerance * max(1.0, abs(energy))
            energy = e_new
        else:
            # keep the current field; tighten the coupling and try again
            a = _search_step(cost64, d, grid, data_weight, theta)
            converged = False
        energies.append(energy)
        theta = max(theta * cfg.theta_decay, cfg.theta_end)
        if converged and theta <= cfg.theta_end:
            break

    field = InverseDepthField(d, conf)
    return RegularizerResult(field, np.asarray(energies))


def lambda_sweep(cv: CostVolume, lambdas, gt: DepthMap,
                 cfg: RegularizerConfig = RegularizerConfig(),
                 eval_mask: np.ndarray | None = None) -> list[tuple[float, DepthMetrics]]:
    """Run one full minimization per lambda and score each against ground truth.

    ``eval_mask`` optionally restricts scoring to a pixel subset (e.g. the
    winner-take-all support) so rows stay comparable across methods.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("need at least one lambda value")
    rows = []
    for lam in lambdas:
        res = minimize_energy(cv, replace(cfg, lam=float(lam)))
        dm = res.field.depth_map(cfg.rho_floor)
        if eval_mask is not None:
            dm = DepthMap(dm.depth, dm.valid & eval_mask)
        rows.append((float(lam), evaluate(dm, gt)))
    return rows


def save_energy_csv(energies: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("outer_iter,energy\n")
        for i, e in enumerate(energies):
            f.write(f"{i},{float(e)!r}\n")


def save_sweep_csv(rows: list[tuple[float, DepthMetrics]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("lambda,rmse,log,absrel,sqrel,d1,d2,d3\n")
        for lam, m in rows:
            f.write(f"{lam!r},{m.csv_row()}\n")
