"""Central-difference verification of every differentiable primitive.

Each registered op builds a seeded random instance, evaluates a scalar
objective, and exposes analytic gradients for a set of named parameter
arrays. The harness perturbs every coordinate with a central difference of
step h and reports the worst relative error, where the denominator is
max(|analytic|, |numeric|, 0.001 * gradient scale) so near-zero components
are judged against the overall gradient magnitude instead of blowing up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adjoint import solve_backward, solve_with_tape
from .grid import ConfidenceField, DepthMap, GradientField, random_pool_indices, pooled_coords, sample_stack, scatter_samples, synth_scene, SceneSpec, block_mean
from .losses import LossConfig, depth_loss, depth_loss_grad, variational_loss, variational_loss_grad
from .pipeline import ToyModel, backward, conv3x3, conv3x3_backward, toy_loss
from .solver import SolveConfig

__all__ = ["GradcheckReport", "gradcheck", "registered_ops"]

DEFAULT_STEP = 1e-6
# toy_model chains many primitives, so its default tolerance is looser
DEFAULT_TOLERANCES = {
    "solve": 1e-5,
    "depth_loss": 1e-6,
    "variational_loss": 1e-5,
    "conv3x3": 1e-6,
    "metric_layer": 1e-6,
    "toy_model": 1e-4,
}


@dataclass
class GradcheckReport:
    op: str
    seed: int
    step: float
    tolerance: float
    max_rel_error: float
    n_coords: int
    failures: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "seed": self.seed,
            "step": self.step,
            "tolerance": self.tolerance,
            "max_rel_error": self.max_rel_error,
            "n_coords": self.n_coords,
            "passed": self.passed,
            "failures": self.failures[:20],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class _Instance:
    params: dict[str, np.ndarray]
    value: Callable[[], float]
    analytic: Callable[[], dict[str, np.ndarray]]


def _compare(instance: _Instance, step: float, tolerance: float) -> tuple[float, int, list]:
    analytic = instance.analytic()
    numeric = {name: np.zeros_like(arr) for name, arr in instance.params.items()}
    for name, arr in instance.params.items():
        flat = arr.ravel()
        num = numeric[name].ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = instance.value()
            flat[k] = orig - step
            down = instance.value()
            flat[k] = orig
            num[k] = (up - down) / (2.0 * step)

    scale = max(
        max((np.max(np.abs(a)) for a in analytic.values()), default=0.0),
        max((np.max(np.abs(n)) for n in numeric.values()), default=0.0),
    )
    floor = 1e-3 * scale + 1e-12
    worst = 0.0
    count = 0
    failures = []
    for name in instance.params:
        a = analytic[name].ravel()
        n = numeric[name].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = np.abs(a - n) / denom
        count += rel.size
        if rel.size:
            worst = max(worst, float(rel.max()))
        for k in np.flatnonzero(rel > tolerance):
            failures.append(
                {"param": name, "index": int(k), "analytic": float(a[k]),
                 "numeric": float(n[k]), "rel_error": float(rel[k])}
            )
    return worst, count, failures


def _make_solve(seed: int) -> _Instance:
    rng = np.random.default_rng(seed)
    height, width = 4, 4
    gx = rng.normal(0.0, 1.0, (height, width - 1))
    gy = rng.normal(0.0, 1.0, (height - 1, width))
    wx = rng.uniform(0.3, 0.95, (height, width - 1))
    wy = rng.uniform(0.3, 0.95, (height - 1, width))
    gbar = rng.normal(0.0, 1.0, height * width)
    cfg = SolveConfig()
    params = {"gx": gx, "gy": gy, "wx": wx, "wy": wy}

    def value():
        z, _ = solve_with_tape(GradientField(gx, gy), ConfidenceField(wx, wy), cfg)
        return float(gbar @ z.values.ravel())

    def analytic():
        _, tape = solve_with_tape(GradientField(gx, gy), ConfidenceField(wx, wy), cfg)
        sg = solve_backward(tape, gbar)
        return {"gx": sg.gamma_x, "gy": sg.gamma_y, "wx": sg.sigma_x, "wy": sg.sigma_y}

    return _Instance(params, value, analytic)


def _make_depth_loss(seed: int) -> _Instance:
    rng = np.random.default_rng(seed)
    shape = (4, 4)
    pred = rng.uniform(1.0, 4.0, shape)
    gt_vals = rng.uniform(1.0, 4.0, shape)
    valid = rng.random(shape) > 0.2
    valid.flat[0] = True
    gt = DepthMap(gt_vals, valid)
    alpha = 0.85
    params = {"pred": pred}

    def value():
        return depth_loss(DepthMap.full(pred), gt, alpha)

    def analytic():
        _, g = depth_loss_grad(DepthMap.full(pred), gt, alpha)
        return {"pred": g}

    return _Instance(params, value, analytic)


def _make_variational(seed: int) -> _Instance:
    rng = np.random.default_rng(seed)
    n_channels, hp, wp, factor = 3, 4, 4, 2
    gt_vals = rng.uniform(1.0, 4.0, (hp * factor, wp * factor))
    gt_valid = rng.random(gt_vals.shape) > 0.15
    gt = DepthMap(np.where(gt_valid, gt_vals, 0.0), gt_valid)
    stack = rng.normal(0.0, 1.0, (n_channels, hp, wp))
    fuse_w = rng.normal(0.0, 1.0, n_channels)
    fuse_b = np.array([rng.normal()])
    rows, cols, cell_valid = random_pool_indices(gt, factor, seed)
    ys, xs = pooled_coords(rows, cols, factor)
    ys = np.where(cell_valid, ys, 0.0)
    xs = np.where(cell_valid, xs, 0.0)
    q_vals = np.where(cell_valid, gt.values[rows.clip(0), cols.clip(0)], 0.0)
    q_gt = DepthMap(q_vals, cell_valid)
    params = {"stack": stack, "fuse_w": fuse_w, "fuse_b": fuse_b}

    def q_hat():
        return np.where(cell_valid[None], sample_stack(stack, ys, xs), 0.0)

    def value():
        return variational_loss(q_hat(), q_gt, cell_valid, fuse_w, fuse_b[0])

    def analytic():
        _, dq, dfw, dfb = variational_loss_grad(q_hat(), q_gt, cell_valid, fuse_w, fuse_b[0])
        return {
            "stack": scatter_samples(dq, ys, xs, (hp, wp)),
            "fuse_w": dfw,
            "fuse_b": np.array([dfb]),
        }

    return _Instance(params, value, analytic)


def _make_conv(seed: int) -> _Instance:
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (2, 5, 5))
    w = rng.normal(0.0, 0.5, (3, 2, 3, 3))
    b = rng.normal(0.0, 0.5, 3)
    probe = rng.normal(0.0, 1.0, (3, 5, 5))
    params = {"x": x, "w": w, "b": b}

    def value():
        return float(np.sum(conv3x3(x, w, b) * probe))

    def analytic():
        dx, dw, db = conv3x3_backward(x, w, probe)
        return {"x": dx, "w": dw, "b": db}

    return _Instance(params, value, analytic)


def _make_metric_layer(seed: int) -> _Instance:
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, 1.0, (4, 5))
    scale = np.array([rng.uniform(0.5, 2.0)])
    shift = np.array([rng.normal()])
    probe = rng.normal(0.0, 1.0, z.shape)
    params = {"z": z, "scale": scale, "shift": shift}

    def value():
        return float(np.sum(scale[0] * (z + shift[0]) * probe))

    def analytic():
        return {
            "z": scale[0] * probe,
            "scale": np.array([float(np.sum((z + shift[0]) * probe))]),
            "shift": np.array([scale[0] * float(probe.sum())]),
        }

    return _Instance(params, value, analytic)


def _make_toy_model(seed: int) -> _Instance:
    factor = 2
    spec = SceneSpec(seed=seed + 17, height=8, width=8, planes=3)
    image, gt = synth_scene(spec)
    image_lr = block_mean(image, factor)
    model = ToyModel.init(seed, features=4, channels=2)
    loss_cfg = LossConfig(alpha=0.85, lam=0.1, pool_factor=factor, seed=seed)
    solve_cfg = SolveConfig()
    params = dict(model.param_items())

    def value():
        return toy_loss(model, image_lr, gt, loss_cfg, solve_cfg)

    def analytic():
        grads, _ = backward(model, image_lr, gt, loss_cfg, solve_cfg)
        return grads

    return _Instance(params, value, analytic)


_REGISTRY = {
    "solve": _make_solve,
    "depth_loss": _make_depth_loss,
    "variational_loss": _make_variational,
    "conv3x3": _make_conv,
    "metric_layer": _make_metric_layer,
    "toy_model": _make_toy_model,
}


def registered_ops() -> list[str]:
    return sorted(_REGISTRY)


def gradcheck(
    op_name: str,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of a registered op against central
    differences at a seeded random point; the report is deterministic."""
    if op_name not in _REGISTRY:
        raise ValueError(
            f"unknown op {op_name!r}; registered: {', '.join(registered_ops())}"
        )
    tol = tolerance if tolerance is not None else DEFAULT_TOLERANCES[op_name]
    instance = _REGISTRY[op_name](seed)
    worst, count, failures = _compare(instance, step, tol)
    return GradcheckReport(
        op=op_name, seed=seed, step=step, tolerance=tol,
        max_rel_error=worst, n_coords=count, failures=failures,
    )
