"""Dense grid fields, synthetic piecewise-planar scenes, and pooling ops.

Conventions used throughout the package: grids are row-major (row, col)
arrays; x runs left to right along columns, y top to bottom along rows.
Forward differences are stored compactly: an H x W grid has H x (W-1)
x-differences and (H-1) x W y-differences, so no undefined boundary
entries exist in any constraint system built from them.

All functions here are pure (seeds included), so values can be shared
read-only across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "DepthMap",
    "GradientField",
    "ConfidenceField",
    "ChannelStack",
    "SceneSpec",
    "synth_scene",
    "exact_gradients",
    "observe_gradients",
    "random_pool_indices",
    "sample_stack",
    "scatter_samples",
    "random_pool_pair",
    "bilinear_upsample",
    "bilinear_upsample_adjoint",
    "block_mean",
]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """H x W field of depth values with a per-pixel validity mask.

    Values must be finite wherever ``valid`` is true. Positivity of metric
    maps is checked at the point of use (losses, metrics) rather than here,
    so unscaled solver output can live in the same type.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {values.shape}")
        if valid.shape != values.shape:
            raise ValueError(
                f"validity mask shape {valid.shape} != values shape {values.shape}"
            )
        if not np.all(np.isfinite(values[valid])):
            raise ValueError("non-finite value at a valid pixel")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def full(cls, values) -> "DepthMap":
        """Wrap an array as a fully valid map."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def _grid_shape_of(gx: np.ndarray, gy: np.ndarray, what: str) -> tuple[int, int]:
    if gx.ndim != 2 or gy.ndim != 2:
        raise ValueError(f"{what} components must be 2-D")
    height, width = gx.shape[0], gy.shape[1]
    if gx.shape != (height, width - 1) or gy.shape != (height - 1, width):
        raise ValueError(
            f"inconsistent {what} shapes {gx.shape} / {gy.shape}: "
            f"expected (H, W-1) and (H-1, W)"
        )
    return height, width


@dataclass(frozen=True, eq=False)
class GradientField:
    """Compact forward differences of an H x W grid.

    ``gx[i, j] = z[i, j+1] - z[i, j]`` (shape H x (W-1)),
    ``gy[i, j] = z[i+1, j] - z[i, j]`` (shape (H-1) x W).
    """

    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        gx = np.asarray(self.gx, dtype=np.float64)
        gy = np.asarray(self.gy, dtype=np.float64)
        _grid_shape_of(gx, gy, "gradient")
        if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
            raise ValueError("gradient entries must be finite")
        object.__setattr__(self, "gx", gx)
        object.__setattr__(self, "gy", gy)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.gx.shape[0], self.gy.shape[1]


@dataclass(frozen=True, eq=False)
class ConfidenceField:
    """Per-constraint weights in [0, 1], shaped like a GradientField."""

    wx: np.ndarray
    wy: np.ndarray

    def __post_init__(self):
        wx = np.asarray(self.wx, dtype=np.float64)
        wy = np.asarray(self.wy, dtype=np.float64)
        _grid_shape_of(wx, wy, "confidence")
        for arr in (wx, wy):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError("confidence entries must lie in [0, 1]")
        object.__setattr__(self, "wx", wx)
        object.__setattr__(self, "wy", wy)

    @classmethod
    def ones(cls, height: int, width: int) -> "ConfidenceField":
        return cls(np.ones((height, width - 1)), np.ones((height - 1, width)))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.wx.shape[0], self.wy.shape[1]


@dataclass(frozen=True, eq=False)
class ChannelStack:
    """S paired (gradient, confidence) channels over one common grid."""

    channels: tuple[tuple[GradientField, ConfidenceField], ...]

    def __post_init__(self):
        channels = tuple(tuple(pair) for pair in self.channels)
        if not channels:
            raise ValueError("channel stack must hold at least one channel")
        shape = channels[0][0].grid_shape
        for k, (grad, conf) in enumerate(channels):
            if grad.grid_shape != shape or conf.grid_shape != shape:
                raise ValueError(f"channel {k} grid shape differs from channel 0")
        object.__setattr__(self, "channels", channels)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.channels[0][0].grid_shape


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a seeded synthetic piecewise-planar scene.

    ``noise`` and ``outlier_fraction`` describe gradient observations
    derived from the scene (see :func:`observe_gradients`); the depth map
    itself is always exact.
    """

    seed: int
    height: int
    width: int
    planes: int = 3
    depth_range: tuple[float, float] = (1.0, 5.0)
    noise: float = 0.0
    outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        lo, hi = self.depth_range
        if not (0.0 < lo <= hi):
            raise ValueError("depth range must satisfy 0 < min <= max")
        if not (1 <= self.planes <= self.height * self.width):
            raise ValueError("plane count must be in [1, H*W]")
        if self.noise < 0.0:
            raise ValueError("gradient noise must be non-negative")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ValueError("outlier fraction must lie in [0, 1)")


def _spread_sites(rng: np.random.Generator, height: int, width: int, k: int) -> np.ndarray:
    """k well-separated pixel sites, sampled d^2-weighted (k-means++ style)."""
    n = height * width
    pts = np.stack(np.unravel_index(np.arange(n), (height, width)), axis=1).astype(float)
    chosen = [int(rng.integers(n))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total <= 0.0:
            remaining = np.setdiff1d(np.arange(n), np.array(chosen))
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return pts[chosen].astype(int)


_IMAGE_NOISE_STD = 0.01


def _shade(depth: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Slope shading plus a weak absolute-depth cue.

    Local intensity is a linear function of the surface slopes (normalized
    by the steepest slope the generator can emit), so first differences are
    directly readable from a small neighborhood while absolute depth is
    visible only through a faint global cue.
    """
    height, width = depth.shape
    gxp = np.zeros_like(depth)
    gyp = np.zeros_like(depth)
    if width > 1:
        gxp[:, :-1] = np.diff(depth, axis=1)
        gxp[:, -1] = gxp[:, -2]
    if height > 1:
        gyp[:-1, :] = np.diff(depth, axis=0)
        gyp[-1, :] = gyp[-2, :]
    span = hi - lo
    slope_unit = span / max(height, width) if span > 0 else 1.0
    shade = 0.5 + 0.25 * (gxp / slope_unit) + 0.20 * (gyp / slope_unit)
    cue = (depth - lo) / span if span > 0 else np.full_like(depth, 0.5)
    img = 0.88 * shade + 0.06 * (1.0 - cue) + 0.03 + rng.normal(
        0.0, _IMAGE_NOISE_STD, depth.shape
    )
    return np.clip(img, 0.0, 1.0)


def _every_plane_owns_a_block(labels: np.ndarray, n_planes: int) -> bool:
    """Each plane must own at least one full 2x2 block (no sliver regions)."""
    height, width = labels.shape
    if n_planes > 1 and (height < 2 or width < 2):
        return False
    owned = np.zeros(n_planes, dtype=bool)
    if height >= 2 and width >= 2:
        same = (
            (labels[:-1, :-1] == labels[:-1, 1:])
            & (labels[:-1, :-1] == labels[1:, :-1])
            & (labels[:-1, :-1] == labels[1:, 1:])
        )
        owned[np.unique(labels[:-1, :-1][same])] = True
    else:
        owned[np.unique(labels)] = True
    return bool(owned.all())


def _sample_envelope(rng, height, width, n_planes):
    """Continuous piecewise-affine surface whose regions are the Voronoi
    cells of ``n_planes`` spread sites.

    ||x - x0||^2 - min_k ||x - q_k||^2 is affine on each cell (the
    quadratic terms cancel), every site owns its cell, and cells are
    convex, hence connected regions of constant gradient.
    """
    # off-lattice jitter keeps grid points away from cell creases, where two
    # planes agree exactly and region membership would be ambiguous
    sites = _spread_sites(rng, height, width, n_planes).astype(float)
    sites += rng.uniform(0.1, 0.9, size=sites.shape)
    x0 = np.array(
        [rng.uniform(-0.3 * height, 1.3 * height), rng.uniform(-0.3 * width, 1.3 * width)]
    )
    ii, jj = np.mgrid[0:height, 0:width]
    d0 = (ii - x0[0]) ** 2 + (jj - x0[1]) ** 2
    dk = (ii[..., None] - sites[:, 0]) ** 2 + (jj[..., None] - sites[:, 1]) ** 2
    surface = d0 - dk.min(axis=-1)
    if rng.random() < 0.5:
        surface = -surface
    labels = np.argmin(dk, axis=-1)
    return surface, labels


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, DepthMap]:
    """Generate a shaded image and an exact piecewise-planar depth map.

    The surface is continuous piecewise-affine with exactly ``spec.planes``
    convex regions (Voronoi cells of spread sites), rescaled to fill the
    depth range. Continuity keeps every first difference finite and locally
    visible in the shading. A degenerate depth range collapses the scene to
    a constant map. Identical seeds produce bit-identical output.
    """
    rng = np.random.default_rng(spec.seed)
    height, width = spec.height, spec.width
    lo, hi = spec.depth_range
    span = hi - lo

    if span == 0.0 or height * width == 1:
        depth = np.full((height, width), lo)
    else:
        for _ in range(100):
            surface, labels = _sample_envelope(rng, height, width, spec.planes)
            ptp = surface.max() - surface.min()
            if ptp > 0 and _every_plane_owns_a_block(labels, spec.planes):
                break
        else:
            raise ValueError(
                f"could not fit {spec.planes} planes on a {height}x{width} grid; "
                "reduce the plane count"
            )
        margin = 0.02 * span
        depth = lo + margin + (span - 2.0 * margin) * (surface - surface.min()) / ptp

    image = _shade(depth, lo, hi, rng)
    return image, DepthMap.full(depth)


def exact_gradients(depth: DepthMap) -> GradientField:
    """Compact forward differences of a fully valid map."""
    if not depth.valid.all():
        raise ValueError("exact_gradients requires a fully valid depth map")
    z = depth.values
    return GradientField(np.diff(z, axis=1), np.diff(z, axis=0))


def observe_gradients(
    depth: DepthMap,
    noise: float = 0.0,
    outlier_fraction: float = 0.0,
    seed: int = 0,
    outlier_scale: float = 100.0,
) -> tuple[GradientField, ConfidenceField]:
    """Exact gradients corrupted by seeded noise and large outliers.

    A fraction of entries (drawn over both axes jointly) gets +-``outlier_scale``
    added and its confidence set to 0; every other entry keeps confidence 1.
    """
    rng = np.random.default_rng(seed)
    grad = exact_gradients(depth)
    gx = grad.gx + (rng.normal(0.0, noise, grad.gx.shape) if noise > 0 else 0.0)
    gy = grad.gy + (rng.normal(0.0, noise, grad.gy.shape) if noise > 0 else 0.0)
    wx = np.ones_like(gx)
    wy = np.ones_like(gy)
    total = gx.size + gy.size
    n_out = int(round(outlier_fraction * total))
    if n_out:
        idx = rng.choice(total, size=n_out, replace=False)
        signs = rng.choice([-1.0, 1.0], size=n_out)
        flat_g = np.concatenate([gx.ravel(), gy.ravel()])
        flat_w = np.concatenate([wx.ravel(), wy.ravel()])
        flat_g[idx] += signs * outlier_scale
        flat_w[idx] = 0.0
        gx = flat_g[: gx.size].reshape(gx.shape)
        gy = flat_g[gx.size :].reshape(gy.shape)
        wx = flat_w[: wx.size].reshape(wx.shape)
        wy = flat_w[wx.size :].reshape(wy.shape)
    return GradientField(gx, gy), ConfidenceField(wx, wy)


def random_pool_indices(
    gt: DepthMap, factor: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick one valid pixel per factor x factor block, uniformly at random.

    Returns full-resolution (rows, cols) of the picks and the block validity
    mask, each shaped (H/factor, W/factor). Blocks without a valid pixel get
    row = col = -1. The draw is the argmax of iid uniform scores over the
    valid pixels of each block, so a block with a single valid pixel selects
    it regardless of the seed.
    """
    height, width = gt.values.shape
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    if height % factor or width % factor:
        raise ValueError(
            f"grid {height}x{width} is not divisible by pooling factor {factor}"
        )
    hp, wp = height // factor, width // factor
    rng = np.random.default_rng(seed)
    scores = np.where(gt.valid, rng.random((height, width)), -1.0)
    blocks = (
        scores.reshape(hp, factor, wp, factor)
        .transpose(0, 2, 1, 3)
        .reshape(hp, wp, factor * factor)
    )
    flat_pick = np.argmax(blocks, axis=-1)
    best = np.take_along_axis(blocks, flat_pick[..., None], axis=-1)[..., 0]
    cell_valid = best >= 0.0
    rows = np.arange(hp)[:, None] * factor + flat_pick // factor
    cols = np.arange(wp)[None, :] * factor + flat_pick % factor
    rows = np.where(cell_valid, rows, -1)
    cols = np.where(cell_valid, cols, -1)
    return rows, cols, cell_valid


def _bilinear_parts(ys, xs, height, width):
    ys = np.clip(ys, 0.0, float(height - 1))
    xs = np.clip(xs, 0.0, float(width - 1))
    i0 = np.minimum(np.floor(ys).astype(int), height - 1)
    j0 = np.minimum(np.floor(xs).astype(int), width - 1)
    i1 = np.minimum(i0 + 1, height - 1)
    j1 = np.minimum(j0 + 1, width - 1)
    return i0, i1, j0, j1, ys - i0, xs - j0


def sample_stack(stack: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Clamped bilinear samples of each channel at continuous (y, x)."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError("stack must be 3-D (channels, height, width)")
    _, height, width = stack.shape
    i0, i1, j0, j1, ty, tx = _bilinear_parts(ys, xs, height, width)
    return (
        stack[:, i0, j0] * (1.0 - ty) * (1.0 - tx)
        + stack[:, i0, j1] * (1.0 - ty) * tx
        + stack[:, i1, j0] * ty * (1.0 - tx)
        + stack[:, i1, j1] * ty * tx
    )


def scatter_samples(
    d_samples: np.ndarray, ys: np.ndarray, xs: np.ndarray, shape: tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`sample_stack` for fixed sample locations."""
    d_samples = np.asarray(d_samples, dtype=np.float64)
    n_channels = d_samples.shape[0]
    height, width = shape
    i0, i1, j0, j1, ty, tx = _bilinear_parts(ys, xs, height, width)
    out = np.zeros((n_channels, height, width))
    cidx = np.arange(n_channels)[:, None, None]
    np.add.at(out, (cidx, i0[None], j0[None]), d_samples * (1.0 - ty) * (1.0 - tx))
    np.add.at(out, (cidx, i0[None], j1[None]), d_samples * (1.0 - ty) * tx)
    np.add.at(out, (cidx, i1[None], j0[None]), d_samples * ty * (1.0 - tx))
    np.add.at(out, (cidx, i1[None], j1[None]), d_samples * ty * tx)
    return out


def pooled_coords(rows: np.ndarray, cols: np.ndarray, factor: int):
    """Map full-resolution pick locations into the low-resolution frame.

    Pixel centers sit at integer coordinates in both frames, so full-res
    index I lands at (I + 0.5) / factor - 0.5; a block center maps exactly
    onto its low-resolution pixel.
    """
    ys = (rows + 0.5) / factor - 0.5
    xs = (cols + 0.5) / factor - 0.5
    return ys, xs


def random_pool_pair(
    gt: DepthMap, pred_stack: np.ndarray, factor: int, seed: int
) -> tuple[DepthMap, np.ndarray, np.ndarray]:
    """Randomly pool ground truth and pair it with bilinear prediction samples.

    For each output cell a valid gt pixel is drawn uniformly inside the
    corresponding factor x factor block; the gt value is taken verbatim while
    each prediction channel is sampled bilinearly at that location mapped into
    the low-resolution frame. Cells whose block holds no valid pixel are
    marked invalid.
    """
    pred_stack = np.asarray(pred_stack, dtype=np.float64)
    if pred_stack.ndim != 3:
        raise ValueError("pred_stack must be 3-D (channels, height, width)")
    height, width = gt.values.shape
    hp, wp = pred_stack.shape[1:]
    if (height, width) != (hp * factor, wp * factor):
        raise ValueError(
            f"gt resolution {height}x{width} != factor {factor} x prediction "
            f"resolution {hp}x{wp}"
        )
    rows, cols, cell_valid = random_pool_indices(gt, factor, seed)
    q_vals = np.where(cell_valid, gt.values[rows.clip(0), cols.clip(0)], 0.0)
    q_gt = DepthMap(q_vals, cell_valid)
    ys, xs = pooled_coords(rows, cols, factor)
    q_hat = sample_stack(pred_stack, np.where(cell_valid, ys, 0.0), np.where(cell_valid, xs, 0.0))
    q_hat = np.where(cell_valid[None], q_hat, 0.0)
    return q_gt, q_hat, cell_valid


@lru_cache(maxsize=64)
def _interp_matrix(n_out: int, n_in: int, factor: int) -> np.ndarray:
    coords = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(coords).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = coords - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - t)
    np.add.at(mat, (rows, i1), t)
    return mat


def bilinear_upsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Upsample (h, w) -> (h*factor, w*factor) with the pixel-center mapping."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    ay = _interp_matrix(h * factor, h, factor)
    ax = _interp_matrix(w * factor, w, factor)
    return ay @ arr @ ax.T


def bilinear_upsample_adjoint(dout: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    """Transpose of :func:`bilinear_upsample` (exact adjoint)."""
    dout = np.asarray(dout, dtype=np.float64)
    h, w = shape
    ay = _interp_matrix(h * factor, h, factor)
    ax = _interp_matrix(w * factor, w, factor)
    return ay.T @ dout @ ax


def block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if h % factor or w % factor:
        raise ValueError(f"array {h}x{w} not divisible by {factor}")
    return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
