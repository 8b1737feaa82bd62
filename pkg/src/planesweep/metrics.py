"""Depth-map evaluation: five error measures and three accuracy fractions.

All statistics run over the intersection of prediction validity and
ground-truth validity, in float64.  The delta thresholds use the strict
inequality max(d/d*, d*/d) < 1.25**k.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .depthmap import DepthMap

CSV_HEADER = "rms,log,absrel,sqrel,d1,d2,d3"
TABLE_COLUMNS = ("rms (m)", "log", "abs.rel", "sq.rel",
                 "d<1.25", "d<1.25^2", "d<1.25^3")


@dataclass(frozen=True)
class DepthMetrics:
    rms: float
    log_rms: float
    abs_rel: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.rms, self.log_rms, self.abs_rel, self.sq_rel,
                self.delta1, self.delta2, self.delta3)

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in self.as_tuple())


def evaluate(pred: DepthMap, gt: DepthMap, log_mode: str = "rmse") -> DepthMetrics:
    """Compare predicted against ground-truth depth over jointly valid pixels.

    ``log_mode`` selects the log column: "rmse" (root mean squared log
    difference, the default) or "mean_abs" (mean absolute log difference).
    Raises ValueError when no pixel is jointly valid or a valid prediction
    is not strictly positive.
    """
    if log_mode not in ("rmse", "mean_abs"):
        raise ValueError(f"log_mode must be 'rmse' or 'mean_abs', got {log_mode!r}")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = pred.valid & gt.valid & (gt.depth > 0)
    if not mask.any():
        raise ValueError("no jointly valid pixels to evaluate")
    d = pred.depth[mask].astype(np.float64)
    g = gt.depth[mask].astype(np.float64)
    if np.any(d <= 0):
        raise ValueError("prediction has nonpositive depth at a valid pixel")

    diff = d - g
    rms = float(np.sqrt(np.mean(diff * diff)))
    logdiff = np.log(d) - np.log(g)
    if log_mode == "rmse":
        log_val = float(np.sqrt(np.mean(logdiff * logdiff)))
    else:
        log_val = float(np.mean(np.abs(logdiff)))
    abs_rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff * diff / g))
    ratio = np.maximum(d / g, g / d)
    return DepthMetrics(
        rms=rms,
        log_rms=log_val,
        abs_rel=abs_rel,
        sq_rel=sq_rel,
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def mean_metrics(rows: list[DepthMetrics]) -> DepthMetrics:
    """Unweighted per-column mean over a list of metric rows."""
    if not rows:
        raise ValueError("no metric rows to average")
    cols = np.array([r.as_tuple() for r in rows], dtype=np.float64).mean(axis=0)
    return DepthMetrics(*(float(c) for c in cols))


def format_table(rows: list[tuple[str, DepthMetrics]]) -> str:
    """Fixed-width text table in the standard column order."""
    label_w = max([len(lbl) for lbl, _ in rows] + [len("method")])
    header = "method".ljust(label_w) + "  " + "  ".join(f"{c:>9s}" for c in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for lbl, m in rows:
        cells = "  ".join(f"{v:9.4f}" for v in m.as_tuple())
        lines.append(lbl.ljust(label_w) + "  " + cells)
    return "\n".join(lines)
