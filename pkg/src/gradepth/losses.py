"""Training losses: scale-invariant log depth loss and the gradient-matching
variational loss on randomly pooled ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DepthMap

__all__ = [
    "LossConfig",
    "depth_loss",
    "depth_loss_grad",
    "variational_loss",
    "variational_loss_grad",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    """alpha weighs the squared-mean term of the depth loss; lam weighs the
    variational term in the total loss; pool_factor and seed drive the random
    pooling of ground truth."""

    alpha: float = 0.85
    lam: float = 0.1
    pool_factor: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        if self.pool_factor < 1:
            raise ValueError("pooling factor must be >= 1")


def _log_residuals(pred: DepthMap, gt: DepthMap):
    if pred.values.shape != gt.values.shape:
        raise ValueError(
            f"prediction {pred.values.shape} and ground truth {gt.values.shape} "
            "resolutions differ (upsample the prediction first)"
        )
    mask = pred.valid & gt.valid
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no jointly valid pixels")
    p = pred.values[mask]
    g = gt.values[mask]
    if np.any(p <= 0.0):
        raise ValueError("non-positive prediction at a valid pixel")
    if np.any(g <= 0.0):
        raise ValueError("non-positive ground truth at a valid pixel")
    return mask, n, p, g, np.log(p) - np.log(g)


def depth_loss(pred: DepthMap, gt: DepthMap, alpha: float = 0.85) -> float:
    """(1/N) sum e^2 - (alpha/N^2) (sum e)^2 with e = log pred - log gt,
    over jointly valid pixels. Scale-invariant exactly when alpha = 1."""
    _, n, _, _, e = _log_residuals(pred, gt)
    return float(np.mean(e**2) - alpha * np.mean(e) ** 2)


def depth_loss_grad(
    pred: DepthMap, gt: DepthMap, alpha: float = 0.85
) -> tuple[float, np.ndarray]:
    """Loss value plus dL/dpred (H x W, zero at invalid pixels)."""
    mask, n, p, _, e = _log_residuals(pred, gt)
    loss = float(np.mean(e**2) - alpha * np.mean(e) ** 2)
    de = 2.0 * e / n - 2.0 * alpha * e.sum() / n**2
    grad = np.zeros_like(pred.values)
    grad[mask] = de / p
    return loss, grad


def _fused_diffs(q_hat, fuse_w, fuse_b):
    fused = np.tensordot(fuse_w, q_hat, axes=1) + fuse_b
    return fused, np.diff(fused, axis=1), np.diff(fused, axis=0)


def _var_masks(cell_valid: np.ndarray, gt_valid: np.ndarray):
    ok = cell_valid & gt_valid
    return ok[:, 1:] & ok[:, :-1], ok[1:, :] & ok[:-1, :]


def variational_loss(
    q_hat: np.ndarray,
    q_gt: DepthMap,
    cell_valid: np.ndarray,
    fuse_w: np.ndarray,
    fuse_b: float,
) -> float:
    """Mean absolute deviation between the forward differences of the fused
    prediction channels and of the pooled ground truth, over positions whose
    two endpoint cells are both valid (x and y positions pooled into one
    count)."""
    q_hat = np.asarray(q_hat, dtype=np.float64)
    fuse_w = np.asarray(fuse_w, dtype=np.float64)
    if q_hat.ndim != 3 or q_hat.shape[1:] != q_gt.values.shape:
        raise ValueError("q_hat must be (S, H', W') matching the pooled gt")
    if fuse_w.shape != (q_hat.shape[0],):
        raise ValueError("fusion weights must have one entry per channel")
    _, dxf, dyf = _fused_diffs(q_hat, fuse_w, fuse_b)
    dxg = np.diff(q_gt.values, axis=1)
    dyg = np.diff(q_gt.values, axis=0)
    mx, my = _var_masks(np.asarray(cell_valid, dtype=bool), q_gt.valid)
    n = int(mx.sum()) + int(my.sum())
    if n == 0:
        raise ValueError("no valid difference positions")
    return float((np.abs(dxf - dxg)[mx].sum() + np.abs(dyf - dyg)[my].sum()) / n)


def variational_loss_grad(
    q_hat: np.ndarray,
    q_gt: DepthMap,
    cell_valid: np.ndarray,
    fuse_w: np.ndarray,
    fuse_b: float,
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Loss value plus gradients w.r.t. q_hat, fuse_w, and fuse_b.

    Uses sign(0) = 0 as the subgradient of |.| at its kink.
    """
    q_hat = np.asarray(q_hat, dtype=np.float64)
    fuse_w = np.asarray(fuse_w, dtype=np.float64)
    fused, dxf, dyf = _fused_diffs(q_hat, fuse_w, fuse_b)
    dxg = np.diff(q_gt.values, axis=1)
    dyg = np.diff(q_gt.values, axis=0)
    mx, my = _var_masks(np.asarray(cell_valid, dtype=bool), q_gt.valid)
    n = int(mx.sum()) + int(my.sum())
    if n == 0:
        raise ValueError("no valid difference positions")
    ex = np.where(mx, dxf - dxg, 0.0)
    ey = np.where(my, dyf - dyg, 0.0)
    loss = float((np.abs(ex).sum() + np.abs(ey).sum()) / n)

    sx = np.sign(ex) / n
    sy = np.sign(ey) / n
    dfused = np.zeros_like(fused)
    dfused[:, 1:] += sx
    dfused[:, :-1] -= sx
    dfused[1:, :] += sy
    dfused[:-1, :] -= sy

    dq_hat = fuse_w[:, None, None] * dfused[None]
    dfuse_w = np.tensordot(q_hat, dfused, axes=([1, 2], [0, 1]))
    dfuse_b = float(dfused.sum())
    return loss, dq_hat, dfuse_w, dfuse_b


def total_loss(depth: float, variational: float, lam: float = 0.1) -> float:
    """Depth term plus lam times the variational term."""
    if lam < 0.0:
        raise ValueError("lambda must be non-negative")
    return depth + lam * variational
