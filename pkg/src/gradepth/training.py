"""Deterministic training of the toy pipeline on synthetic scenes.

Adam (beta1 0.9, beta2 0.999, eps 1e-8, no weight decay) with a cosine
learning-rate schedule. Scenes are generated at full resolution; the model
consumes block-averaged images at 1/pool_factor resolution, the depth loss
compares the bilinearly upsampled prediction against full-resolution ground
truth, and the variational loss compares channel samples against randomly
pooled ground truth. Per-sample pooling seeds depend on the sample index
only, not the epoch, so a zero learning rate yields a flat loss curve.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .fileio import atomic_write_bytes
from .grid import DepthMap, SceneSpec, block_mean, synth_scene
from .losses import LossConfig
from .metrics import MetricsReport, aggregate_reports, evaluate
from .pipeline import (
    CONV_REPLACEMENT,
    V_LAYER,
    ToyModel,
    backward,
    count_params,
    predict_full,
)
from .solver import SolveConfig

__all__ = [
    "DatasetSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "cosine_lr",
    "Adam",
    "make_dataset",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "budget_ratio",
]

CHECKPOINT_FORMAT = "gradepth-toymodel"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic scene collection; scene seeds derive from ``seed``."""

    n_train: int = 32
    n_heldout: int = 8
    height: int = 24
    width: int = 24
    planes: int = 4
    depth_range: tuple[float, float] = (1.0, 5.0)
    seed: int = 0

    def scene_specs(self) -> tuple[list[SceneSpec], list[SceneSpec]]:
        rng = np.random.default_rng(self.seed)
        seeds = rng.integers(0, 2**31 - 1, size=self.n_train + self.n_heldout)

        def spec(s):
            return SceneSpec(
                seed=int(s),
                height=self.height,
                width=self.width,
                planes=self.planes,
                depth_range=self.depth_range,
            )

        return (
            [spec(s) for s in seeds[: self.n_train]],
            [spec(s) for s in seeds[self.n_train :]],
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr_max: float = 3e-3
    lr_min: float = 1e-3
    seed: int = 0
    mode: str = V_LAYER
    features: int = 8
    channels: int = 4
    alpha: float = 0.85
    lam: float = 0.1
    pool_factor: int = 2
    flip: bool = True

    def __post_init__(self):
        # lr 0 is allowed so a zero-step run can serve as a no-op control
        if not (self.lr_max >= self.lr_min >= 0.0):
            raise ValueError("need lr_max >= lr_min >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.mode not in (V_LAYER, CONV_REPLACEMENT):
            raise ValueError(f"unknown mode {self.mode!r}")

    def loss_config(self, seed: int = 0) -> LossConfig:
        return LossConfig(alpha=self.alpha, lam=self.lam,
                          pool_factor=self.pool_factor, seed=seed)


@dataclass
class TrainResult:
    model: ToyModel
    loss_curve: list[dict]
    heldout: MetricsReport
    n_params: int
    mode: str
    wall_s: float


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float) -> float:
    if epochs <= 1:
        return lr_max
    t = epoch / (epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t))


class Adam:
    """Adam without weight decay; state keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, model: ToyModel, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, param in model.param_items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass(eq=False)
class _Sample:
    image_lr: np.ndarray
    gt: DepthMap
    pool_seed: int


def make_dataset(data: DatasetSpec, cfg: TrainConfig) -> tuple[list[_Sample], list[_Sample]]:
    """Materialize train/held-out samples (flip doubles the train set)."""
    factor = cfg.pool_factor
    if data.height % factor or data.width % factor:
        raise ValueError("scene resolution must be divisible by the pooling factor")
    train_specs, held_specs = data.scene_specs()

    def build(spec: SceneSpec, index: int, flipped: bool) -> _Sample:
        image, gt = synth_scene(spec)
        if flipped:
            image = image[:, ::-1].copy()
            gt = DepthMap(gt.values[:, ::-1].copy(), gt.valid[:, ::-1].copy())
        pool_seed = int(
            np.random.default_rng([cfg.seed, index, int(flipped)]).integers(2**31 - 1)
        )
        return _Sample(block_mean(image, factor), gt, pool_seed)

    train = [build(s, i, False) for i, s in enumerate(train_specs)]
    if cfg.flip:
        train += [build(s, i, True) for i, s in enumerate(train_specs)]
    held = [build(s, 10**6 + i, False) for i, s in enumerate(held_specs)]
    return train, held


def budget_ratio(cfg: TrainConfig) -> float:
    """Parameter count of the configured mode relative to v-layer mode."""
    base = count_params(ToyModel.init(0, cfg.features, cfg.channels, V_LAYER))
    this = count_params(ToyModel.init(0, cfg.features, cfg.channels, cfg.mode))
    return this / base


def train(cfg: TrainConfig, data: DatasetSpec) -> TrainResult:
    """Train the toy model; deterministic given cfg.seed.

    In conv-replacement mode the configured feature width must keep the
    parameter count within 10% of the v-layer twin so the ablation compares
    equal budgets.
    """
    if data.n_train < 32:
        raise ValueError("dataset must contain at least 32 training scenes")
    if data.n_heldout < 8:
        raise ValueError("dataset must hold out at least 8 scenes")
    if cfg.mode == CONV_REPLACEMENT:
        ratio = budget_ratio(cfg)
        if abs(ratio - 1.0) > 0.10:
            raise ValueError(
                f"conv-replacement parameter budget off by {100 * (ratio - 1):.1f}%; "
                "increase `features` to bring the modes within 10%"
            )

    start = time.perf_counter()
    train_set, held_set = make_dataset(data, cfg)
    model = ToyModel.init(cfg.seed, cfg.features, cfg.channels, cfg.mode)
    solve_cfg = SolveConfig()
    opt = Adam()
    order_rng = np.random.default_rng([cfg.seed, 0xD1CE])

    curve: list[dict] = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = order_rng.permutation(len(train_set))
        sums = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            acc: dict[str, np.ndarray] | None = None
            for idx in batch:
                sample = train_set[idx]
                grads, parts = backward(
                    model, sample.image_lr, sample.gt,
                    cfg.loss_config(sample.pool_seed), solve_cfg,
                )
                sums += (parts.total, parts.depth, parts.variational)
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
            for name in acc:
                acc[name] /= len(batch)
            opt.step(model, acc, lr)
        mean = sums / len(train_set)
        if not np.all(np.isfinite(mean)):
            raise TrainingDiverged(epoch)
        curve.append(
            {"epoch": epoch, "lr": float(lr), "total": float(mean[0]),
             "depth": float(mean[1]), "variational": float(mean[2])}
        )

    reports = []
    for sample in held_set:
        pred = predict_full(model, sample.image_lr, cfg.pool_factor, solve_cfg)
        reports.append(evaluate(pred, sample.gt))
    heldout = aggregate_reports(reports)

    return TrainResult(
        model=model,
        loss_curve=curve,
        heldout=heldout,
        n_params=count_params(model),
        mode=cfg.mode,
        wall_s=time.perf_counter() - start,
    )


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()


def save_checkpoint(path: str, model: ToyModel, seed: int, config: dict) -> None:
    """Versioned flat binary of float64 parameters behind a JSON header line."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "seed": seed,
        "config_hash": _config_hash(config),
        "mode": model.mode,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in model.param_items()],
        "dtype": "<f8",
    }
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in model.param_items()
    )
    atomic_write_bytes(path, json.dumps(header).encode("utf-8") + b"\n" + payload)


def load_checkpoint(path: str) -> tuple[ToyModel, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != 1:
        raise ValueError("unrecognized checkpoint header")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset * 8 : (offset + n) * 8]
        if len(chunk) != n * 8:
            raise ValueError("checkpoint payload truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += n
    if offset * 8 != len(payload):
        raise ValueError("checkpoint payload has trailing bytes")
    model = ToyModel(mode=header["mode"], **arrays)
    return model, header
