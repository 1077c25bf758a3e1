"""Desk-scale end-to-end model with hand-written reverse-mode gradients.

Architecture: a 3x3 conv feature head, two 3x3 conv heads predicting S
channels of (x, y) difference targets and sigmoid confidences, one
reconstruction step per channel, a 1x1 fusion over channels, and a global
metric head (max pool + affine) regressing scale and shift:

    pred = scale * (fuse(channels) + shift)

In "v-layer" mode each channel is recovered by the weighted difference
solve (differentiated via the adjoint method); in "conv-replacement" mode
the solve is swapped for a single 3x3 convolution over the 2S
confidence-modulated difference maps, everything else identical, which is
the ablation baseline.

The per-channel difference maps are predicted at full H x W and cropped to
the compact field shapes; the cropped column/row receives no gradient by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np
from scipy.special import expit

from .adjoint import solve_backward, solve_with_tape
from .grid import (
    ConfidenceField,
    DepthMap,
    GradientField,
    bilinear_upsample,
    bilinear_upsample_adjoint,
    pooled_coords,
    random_pool_indices,
    sample_stack,
    scatter_samples,
)
from .losses import LossConfig, depth_loss_grad, total_loss, variational_loss_grad
from .solver import SolveConfig

__all__ = [
    "ToyModel",
    "ForwardState",
    "LossParts",
    "conv3x3",
    "conv3x3_backward",
    "forward",
    "backward",
    "toy_loss",
    "predict_full",
    "count_params",
    "PRED_CLAMP",
]

V_LAYER = "v-layer"
CONV_REPLACEMENT = "conv-replacement"

# Predictions are clamped here before any log; gradients stop below the clamp.
PRED_CLAMP = 1e-3


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padding 3x3 correlation. x: (C,H,W), w: (O,C,3,3), b: (O,)."""
    _, height, width = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], height, width))
    out += b[:, None, None]
    for u in range(3):
        for v in range(3):
            out += np.einsum("oc,chw->ohw", w[:, :, u, v], xp[:, u : u + height, v : v + width])
    return out


def conv3x3_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Gradients of conv3x3 w.r.t. input, weights, and bias."""
    _, height, width = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    db = dout.sum(axis=(1, 2))
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for u in range(3):
        for v in range(3):
            patch = xp[:, u : u + height, v : v + width]
            dw[:, :, u, v] = np.einsum("ohw,chw->oc", dout, patch)
            dxp[:, u : u + height, v : v + width] += np.einsum(
                "oc,ohw->chw", w[:, :, u, v], dout
            )
    return dxp[:, 1 : height + 1, 1 : width + 1], dw, db


@dataclass(eq=False)
class ToyModel:
    """All parameters are float64 arrays; ``mode`` picks the channel layer."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    gamma_w: np.ndarray  # (2S, F, 3, 3): S x-difference maps, then S y maps
    gamma_b: np.ndarray
    sigma_w: np.ndarray
    sigma_b: np.ndarray
    fuse_w: np.ndarray  # (S,)
    fuse_b: np.ndarray  # (1,)
    metric_w: np.ndarray  # (2, F) -> (scale, shift)
    metric_b: np.ndarray  # (2,)
    mode: str = V_LAYER
    repl_w: np.ndarray | None = None  # (S, 2S, 3, 3) in conv-replacement mode
    repl_b: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def n_channels(self) -> int:
        return self.fuse_w.shape[0]

    @classmethod
    def init(cls, seed: int, features: int = 8, channels: int = 4,
             mode: str = V_LAYER) -> "ToyModel":
        """Seeded init. The metric head starts at scale 1, shift 3 so initial
        predictions sit mid-range and clear of the positivity clamp."""
        if mode not in (V_LAYER, CONV_REPLACEMENT):
            raise ValueError(f"unknown mode {mode!r}")
        rng = np.random.default_rng(seed)
        f, s = features, channels

        def conv_init(n_out, n_in, gain=1.0):
            return gain * rng.normal(0.0, 1.0 / np.sqrt(9.0 * n_in), (n_out, n_in, 3, 3))

        model = cls(
            conv1_w=conv_init(f, 1),
            conv1_b=np.zeros(f),
            gamma_w=conv_init(2 * s, f, gain=0.3),
            gamma_b=np.zeros(2 * s),
            sigma_w=conv_init(2 * s, f, gain=0.3),
            sigma_b=np.zeros(2 * s),
            fuse_w=np.full(s, 1.0 / s),
            fuse_b=np.zeros(1),
            metric_w=rng.normal(0.0, 0.01, (2, f)),
            metric_b=np.array([1.0, 3.0]),
            mode=mode,
        )
        if mode == CONV_REPLACEMENT:
            model.repl_w = conv_init(s, 2 * s)
            model.repl_b = np.zeros(s)
        return model

    def param_items(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters in a fixed order (gradient accumulation relies on it)."""
        names = ["conv1_w", "conv1_b", "gamma_w", "gamma_b", "sigma_w", "sigma_b"]
        if self.mode == CONV_REPLACEMENT:
            names += ["repl_w", "repl_b"]
        names += ["fuse_w", "fuse_b", "metric_w", "metric_b"]
        for name in names:
            yield name, getattr(self, name)

    def copy(self) -> "ToyModel":
        kwargs = {}
        for f_ in fields(self):
            val = getattr(self, f_.name)
            kwargs[f_.name] = val.copy() if isinstance(val, np.ndarray) else val
        return ToyModel(**kwargs)


def count_params(model: ToyModel) -> int:
    return sum(arr.size for _, arr in model.param_items())


@dataclass(eq=False)
class ForwardState:
    """Intermediates cached for the backward pass."""

    image: np.ndarray
    pre1: np.ndarray
    feats: np.ndarray
    g_maps: np.ndarray
    s_pre: np.ndarray
    s_maps: np.ndarray
    z_stack: np.ndarray
    tapes: list | None
    fused: np.ndarray
    pool_vals: np.ndarray
    pool_idx: np.ndarray
    scale: float
    shift: float
    pred: np.ndarray


def forward(
    model: ToyModel, image: np.ndarray, solve_cfg: SolveConfig | None = None
) -> tuple[DepthMap, ForwardState]:
    """Run the model on an (h, w) image in [0, 1]; deterministic given the
    parameters. Solver failures propagate."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    cfg = solve_cfg if solve_cfg is not None else SolveConfig()
    height, width = image.shape
    s_count = model.n_channels

    pre1 = conv3x3(image[None], model.conv1_w, model.conv1_b)
    feats = np.maximum(pre1, 0.0)
    g_maps = conv3x3(feats, model.gamma_w, model.gamma_b)
    s_pre = conv3x3(feats, model.sigma_w, model.sigma_b)
    s_maps = expit(s_pre)

    tapes = None
    if model.mode == V_LAYER:
        tapes = []
        z_stack = np.zeros((s_count, height, width))
        for s in range(s_count):
            grad = GradientField(g_maps[s][:, : width - 1], g_maps[s_count + s][: height - 1, :])
            conf = ConfidenceField(s_maps[s][:, : width - 1], s_maps[s_count + s][: height - 1, :])
            z_map, tape = solve_with_tape(grad, conf, cfg)
            z_stack[s] = z_map.values
            tapes.append(tape)
    else:
        modulated = g_maps * s_maps
        z_stack = conv3x3(modulated, model.repl_w, model.repl_b)

    fused = np.tensordot(model.fuse_w, z_stack, axes=1) + model.fuse_b[0]

    pool_vals = feats.max(axis=(1, 2))
    pool_idx = feats.reshape(model.n_features, -1).argmax(axis=1)
    vec = model.metric_w @ pool_vals + model.metric_b
    scale, shift = float(vec[0]), float(vec[1])

    pred = scale * (fused + shift)
    state = ForwardState(
        image=image, pre1=pre1, feats=feats, g_maps=g_maps, s_pre=s_pre,
        s_maps=s_maps, z_stack=z_stack, tapes=tapes, fused=fused,
        pool_vals=pool_vals, pool_idx=pool_idx, scale=scale, shift=shift,
        pred=pred,
    )
    return DepthMap.full(pred), state


@dataclass(frozen=True)
class LossParts:
    total: float
    depth: float
    variational: float


def _pool_factor(gt: DepthMap, state_shape: tuple[int, int], loss_cfg: LossConfig) -> int:
    height, width = state_shape
    if gt.height % height or gt.width % width:
        raise ValueError("ground truth resolution must be a multiple of the model grid")
    factor = gt.height // height
    if gt.width // width != factor:
        raise ValueError("anisotropic resolution ratios are not supported")
    if factor != loss_cfg.pool_factor:
        raise ValueError(
            f"resolution ratio {factor} != configured pooling factor {loss_cfg.pool_factor}"
        )
    return factor


def _loss_chain(model, state: ForwardState, gt: DepthMap, loss_cfg: LossConfig):
    """Shared forward loss evaluation; returns everything backward needs."""
    height, width = state.image.shape
    factor = _pool_factor(gt, (height, width), loss_cfg)

    pred_full = bilinear_upsample(state.pred, factor) if factor > 1 else state.pred
    clamp_mask = pred_full > PRED_CLAMP
    clamped = np.maximum(pred_full, PRED_CLAMP)
    loss_d, d_clamped = depth_loss_grad(DepthMap.full(clamped), gt, loss_cfg.alpha)

    rows, cols, cell_valid = random_pool_indices(gt, factor, loss_cfg.seed)
    ys, xs = pooled_coords(rows, cols, factor)
    ys = np.where(cell_valid, ys, 0.0)
    xs = np.where(cell_valid, xs, 0.0)
    q_hat = np.where(cell_valid[None], sample_stack(state.z_stack, ys, xs), 0.0)
    q_vals = np.where(cell_valid, gt.values[rows.clip(0), cols.clip(0)], 0.0)
    q_gt = DepthMap(q_vals, cell_valid)
    loss_v, dq_hat, dfuse_w_v, dfuse_b_v = variational_loss_grad(
        q_hat, q_gt, cell_valid, model.fuse_w, model.fuse_b[0]
    )

    parts = LossParts(
        total=total_loss(loss_d, loss_v, loss_cfg.lam), depth=loss_d, variational=loss_v
    )
    return parts, factor, clamp_mask, d_clamped, (ys, xs), dq_hat, dfuse_w_v, dfuse_b_v


def toy_loss(
    model: ToyModel,
    image: np.ndarray,
    gt: DepthMap,
    loss_cfg: LossConfig,
    solve_cfg: SolveConfig | None = None,
) -> float:
    """Total loss only (used by finite-difference checks)."""
    _, state = forward(model, image, solve_cfg)
    parts, *_ = _loss_chain(model, state, gt, loss_cfg)
    return parts.total


def backward(
    model: ToyModel,
    image: np.ndarray,
    gt: DepthMap,
    loss_cfg: LossConfig,
    solve_cfg: SolveConfig | None = None,
) -> tuple[dict[str, np.ndarray], LossParts]:
    """Exact reverse-mode gradients of the total loss for every parameter.

    Pooling locations are frozen per call (they depend only on the ground
    truth, the factor, and loss_cfg.seed), matching the loss actually
    evaluated.
    """
    _, state = forward(model, image, solve_cfg)
    parts, factor, clamp_mask, d_clamped, (ys, xs), dq_hat, dfw_v, dfb_v = _loss_chain(
        model, state, gt, loss_cfg
    )
    height, width = state.image.shape
    s_count = model.n_channels
    lam = loss_cfg.lam

    # depth-loss path back to the model-resolution prediction
    d_pred_full = d_clamped * clamp_mask
    d_pred = (
        bilinear_upsample_adjoint(d_pred_full, factor, (height, width))
        if factor > 1
        else d_pred_full
    )

    # metric layer: pred = scale * (fused + shift)
    d_scale = float(np.sum(d_pred * (state.fused + state.shift)))
    d_shift = state.scale * float(np.sum(d_pred))
    d_fused = state.scale * d_pred

    # fusion: fused = sum_s fuse_w[s] z[s] + fuse_b, shared with the
    # variational term evaluated on the pooled samples
    d_fuse_w = np.tensordot(state.z_stack, d_fused, axes=([1, 2], [0, 1]))
    d_fuse_w += lam * dfw_v
    d_fuse_b = np.array([float(d_fused.sum()) + lam * dfb_v])
    d_z = model.fuse_w[:, None, None] * d_fused[None]
    d_z = d_z + lam * scatter_samples(dq_hat, ys, xs, (height, width))

    # metric head
    d_vec = np.array([d_scale, d_shift])
    d_metric_w = np.outer(d_vec, state.pool_vals)
    d_metric_b = d_vec
    d_pool = model.metric_w.T @ d_vec
    d_feats = np.zeros_like(state.feats)
    flat = d_feats.reshape(model.n_features, -1)
    flat[np.arange(model.n_features), state.pool_idx] += d_pool

    grads: dict[str, np.ndarray] = {}
    d_g_maps = np.zeros_like(state.g_maps)
    d_s_maps = np.zeros_like(state.s_maps)

    if model.mode == V_LAYER:
        for s in range(s_count):
            sg = solve_backward(state.tapes[s], d_z[s].ravel())
            d_g_maps[s][:, : width - 1] += sg.gamma_x
            d_g_maps[s_count + s][: height - 1, :] += sg.gamma_y
            d_s_maps[s][:, : width - 1] += sg.sigma_x
            d_s_maps[s_count + s][: height - 1, :] += sg.sigma_y
    else:
        modulated = state.g_maps * state.s_maps
        d_mod, d_repl_w, d_repl_b = conv3x3_backward(modulated, model.repl_w, d_z)
        grads["repl_w"] = d_repl_w
        grads["repl_b"] = d_repl_b
        d_g_maps += d_mod * state.s_maps
        d_s_maps += d_mod * state.g_maps

    d_s_pre = d_s_maps * state.s_maps * (1.0 - state.s_maps)
    dx_sigma, d_sigma_w, d_sigma_b = conv3x3_backward(state.feats, model.sigma_w, d_s_pre)
    dx_gamma, d_gamma_w, d_gamma_b = conv3x3_backward(state.feats, model.gamma_w, d_g_maps)
    d_feats += dx_sigma + dx_gamma

    d_pre1 = d_feats * (state.pre1 > 0.0)
    _, d_conv1_w, d_conv1_b = conv3x3_backward(state.image[None], model.conv1_w, d_pre1)

    grads.update(
        conv1_w=d_conv1_w,
        conv1_b=d_conv1_b,
        gamma_w=d_gamma_w,
        gamma_b=d_gamma_b,
        sigma_w=d_sigma_w,
        sigma_b=d_sigma_b,
        fuse_w=d_fuse_w,
        fuse_b=d_fuse_b,
        metric_w=d_metric_w,
        metric_b=d_metric_b,
    )
    return grads, parts


def predict_full(
    model: ToyModel,
    image: np.ndarray,
    factor: int,
    solve_cfg: SolveConfig | None = None,
) -> DepthMap:
    """Forward plus upsampling to ground-truth resolution and the positivity
    clamp, exactly as the losses see the prediction."""
    pred, _ = forward(model, image, solve_cfg)
    full = bilinear_upsample(pred.values, factor) if factor > 1 else pred.values
    return DepthMap.full(np.maximum(full, PRED_CLAMP))
