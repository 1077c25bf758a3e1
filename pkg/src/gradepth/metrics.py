"""Evaluation metrics for depth maps and the global scale/shift alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grid import DepthMap

__all__ = [
    "MetricsReport",
    "DegenerateAlignment",
    "evaluate",
    "align_scale_shift",
    "metric_layer_apply",
    "irms",
    "aggregate_reports",
]


class DegenerateAlignment(ValueError):
    """Alignment is rank deficient (constant prediction)."""


@dataclass(frozen=True)
class MetricsReport:
    """Standard error suite over jointly valid pixels.

    silog is reported as 100 * sqrt of the variance-like scale-invariant
    log error; rms and rms_log use sqrt(mean(.)); the delta thresholds use
    a strict ``< 1.25**k`` comparison.
    """

    silog: float
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    d1: float
    d2: float
    d3: float
    n_valid: int

    def __post_init__(self):
        if not (self.d1 <= self.d2 <= self.d3):
            raise ValueError("delta thresholds must be monotone")
        if self.n_valid > 0:
            fields = (self.silog, self.abs_rel, self.sq_rel, self.rms,
                      self.rms_log, self.d1, self.d2, self.d3)
            if not all(np.isfinite(v) for v in fields):
                raise ValueError("metrics must be finite when pixels are valid")

    def to_dict(self) -> dict:
        return {
            "silog": self.silog,
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rms": self.rms,
            "rms_log": self.rms_log,
            "d1": self.d1,
            "d2": self.d2,
            "d3": self.d3,
            "n_valid": self.n_valid,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _valid_pairs(pred: DepthMap, gt: DepthMap):
    if pred.values.shape != gt.values.shape:
        raise ValueError("prediction and ground truth resolutions differ")
    mask = pred.valid & gt.valid
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no jointly valid pixels")
    return mask, n, pred.values[mask], gt.values[mask]


def evaluate(pred: DepthMap, gt: DepthMap) -> MetricsReport:
    """Compute the full metric suite over jointly valid pixels."""
    mask, n, p, g = _valid_pairs(pred, gt)
    if np.any(p <= 0.0) or np.any(g <= 0.0):
        raise ValueError("evaluate requires positive depths at valid pixels")
    e = np.log(p) - np.log(g)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    var = max(float(np.mean(e**2) - np.mean(e) ** 2), 0.0)
    return MetricsReport(
        silog=100.0 * float(np.sqrt(var)),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rms=float(np.sqrt(np.mean(diff**2))),
        rms_log=float(np.sqrt(np.mean(e**2))),
        d1=float(np.mean(ratio < 1.25)),
        d2=float(np.mean(ratio < 1.25**2)),
        d3=float(np.mean(ratio < 1.25**3)),
        n_valid=n,
    )


def align_scale_shift(pred: DepthMap, gt: DepthMap) -> tuple[float, float, DepthMap]:
    """Least-squares (s, t) with s*pred + t ~ gt over jointly valid pixels,
    via the closed-form 2x2 normal system. Raises on constant predictions."""
    _, n, p, g = _valid_pairs(pred, gt)
    if n < 2:
        raise ValueError("alignment needs at least two valid pixels")
    sp_ = p.sum()
    spp = (p * p).sum()
    var_p = spp / n - (sp_ / n) ** 2
    if var_p <= 1e-14 * max(1.0, spp / n):
        raise DegenerateAlignment("prediction variance is degenerate; cannot align")
    det = n * spp - sp_**2
    spg = (p * g).sum()
    sg = g.sum()
    s = (n * spg - sp_ * sg) / det
    t = (sg * spp - sp_ * spg) / det
    aligned = DepthMap(s * pred.values + t, pred.valid.copy())
    return float(s), float(t), aligned


def metric_layer_apply(z: DepthMap, scale: float, shift: float) -> DepthMap:
    """Global affine map: metric depth = scale * (z + shift)."""
    return DepthMap(scale * (z.values + shift), z.valid.copy())


def irms(pred: DepthMap, gt: DepthMap) -> float:
    """Optional inverse-depth RMS in 1/km (depths given in meters)."""
    _, _, p, g = _valid_pairs(pred, gt)
    if np.any(p <= 0.0) or np.any(g <= 0.0):
        raise ValueError("irms requires positive depths at valid pixels")
    return float(np.sqrt(np.mean((1000.0 / p - 1000.0 / g) ** 2)))


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Per-scene arithmetic mean of each metric; n_valid totals."""
    if not reports:
        raise ValueError("nothing to aggregate")
    mean = lambda f: float(np.mean([getattr(r, f) for r in reports]))
    return MetricsReport(
        silog=mean("silog"),
        abs_rel=mean("abs_rel"),
        sq_rel=mean("sq_rel"),
        rms=mean("rms"),
        rms_log=mean("rms_log"),
        d1=mean("d1"),
        d2=mean("d2"),
        d3=mean("d3"),
        n_valid=int(sum(r.n_valid for r in reports)),
    )
