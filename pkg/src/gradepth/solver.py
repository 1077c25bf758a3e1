"""Sparse first-order difference systems and their weighted least-squares solves.

The constraint system couples every horizontally and vertically adjacent
pixel pair: row r asks ``z[pixel_b] - z[pixel_a] = gamma[r]`` with weight
``max(conf[r], weight_floor)**2``. Pure difference rows annihilate constants,
so the normal matrix is rank deficient by exactly one on a connected grid;
a gauge (anchor pixel, fixed mean, or Tikhonov ridge) pins that direction.

The normal system is never materialized densely: the direct backend runs a
sparse factorization, the iterative backend a Jacobi-preconditioned
conjugate gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg, splu

from .grid import ChannelStack, ConfidenceField, DepthMap, GradientField

__all__ = [
    "DifferenceOperator",
    "AnchorGauge",
    "MeanGauge",
    "TikhonovGauge",
    "GaugeMode",
    "SolveConfig",
    "SolveDiagnostics",
    "SolveError",
    "SingularSystemError",
    "ConvergenceError",
    "build_operator",
    "apply_operator",
    "apply_operator_transpose",
    "solve",
    "solve_stack",
]


class SolveError(RuntimeError):
    """Base class for solver failures."""


class SingularSystemError(SolveError):
    """The gauged normal system is singular (disconnected constraint graph)."""


class ConvergenceError(SolveError):
    """CG failed to reach the requested tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class DifferenceOperator:
    """Pairwise difference rows over a row-major H x W grid.

    Row r encodes ``out[r] = z[pixel_b[r]] - z[pixel_a[r]]``. The first
    ``n_x = H*(W-1)`` rows are x (right-neighbor) constraints in row-major
    order, followed by the ``(H-1)*W`` y (down-neighbor) constraints.
    """

    height: int
    width: int
    pixel_a: np.ndarray
    pixel_b: np.ndarray
    n_x: int

    @property
    def n_rows(self) -> int:
        return self.pixel_a.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def row_axis(self, row: int) -> str:
        return "x" if row < self.n_x else "y"

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Sparse {-1, +1} matrix form, built on first use."""
        m, n = self.n_rows, self.n_pixels
        rows = np.repeat(np.arange(m), 2)
        cols = np.stack([self.pixel_a, self.pixel_b], axis=1).ravel()
        data = np.tile(np.array([-1.0, 1.0]), m)
        return sp.csr_matrix((data, (rows, cols)), shape=(m, n))


def build_operator(height: int, width: int) -> DifferenceOperator:
    """Enumerate all right- and down-neighbor difference rows."""
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be positive")
    if height * width < 2:
        raise ValueError("a 1x1 grid admits no difference constraints")
    idx = np.arange(height * width).reshape(height, width)
    ax_a = idx[:, :-1].ravel()
    ax_b = idx[:, 1:].ravel()
    ay_a = idx[:-1, :].ravel()
    ay_b = idx[1:, :].ravel()
    return DifferenceOperator(
        height=height,
        width=width,
        pixel_a=np.concatenate([ax_a, ay_a]),
        pixel_b=np.concatenate([ax_b, ay_b]),
        n_x=ax_a.size,
    )


def apply_operator(op: DifferenceOperator, z: np.ndarray) -> np.ndarray:
    """out[r] = z[pixel_b[r]] - z[pixel_a[r]]."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (op.n_pixels,):
        raise ValueError(f"expected flat vector of length {op.n_pixels}, got {z.shape}")
    return z[op.pixel_b] - z[op.pixel_a]


def apply_operator_transpose(op: DifferenceOperator, r: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`apply_operator`: scatter +-r back onto pixels."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (op.n_rows,):
        raise ValueError(f"expected flat vector of length {op.n_rows}, got {r.shape}")
    plus = np.bincount(op.pixel_b, weights=r, minlength=op.n_pixels)
    minus = np.bincount(op.pixel_a, weights=r, minlength=op.n_pixels)
    return plus - minus


@dataclass(frozen=True)
class AnchorGauge:
    """Soft extra row pinning one pixel: weight * (z[row, col] - value) -> 0.

    The weight enters squared, like a confidence. Because pure difference
    rows cannot see the constant mode, the appended row is absorbed exactly
    by that mode and never trades off against data rows.
    """

    row: int = 0
    col: int = 0
    value: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0.0:
            raise ValueError("anchor weight must be positive")


@dataclass(frozen=True)
class MeanGauge:
    """Pick the least-squares solution whose mean equals ``value``."""

    value: float = 0.0


@dataclass(frozen=True)
class TikhonovGauge:
    """Add mu * I to the normal matrix (shrinks the whole solution)."""

    mu: float = 1e-6

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError("tikhonov mu must be positive")


GaugeMode = Union[AnchorGauge, MeanGauge, TikhonovGauge]


@dataclass(frozen=True)
class SolveConfig:
    gauge: GaugeMode = AnchorGauge()
    backend: str = "direct"
    cg_tolerance: float = 1e-10
    cg_max_iters: int | None = None
    weight_floor: float = 1e-8

    def __post_init__(self):
        if self.backend not in ("direct", "cg"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not self.cg_tolerance > 0.0:
            raise ValueError("cg tolerance must be positive")
        if not (0.0 <= self.weight_floor < 1.0):
            raise ValueError("weight floor must lie in [0, 1)")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise ValueError("cg max iterations must be positive")


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    final_residual: float
    factorization_reused: bool


@dataclass(eq=False)
class SystemSolution:
    """Everything retained from one gauged weighted least-squares solve."""

    op: DifferenceOperator
    cfg: SolveConfig
    sigma: np.ndarray  # raw confidences, length M
    w: np.ndarray  # applied weights max(sigma, floor)^2, length M
    z: np.ndarray  # solution, length H*W
    residual_vec: np.ndarray  # gamma - P z, length M
    iterations: int
    final_residual: float
    resolve: Callable[[np.ndarray], np.ndarray]  # solves A x = rhs (gauge-aware)
    reusable_factorization: bool


def _check_connected(op: DifferenceOperator, w: np.ndarray) -> None:
    keep = w > 0.0
    n = op.n_pixels
    graph = sp.coo_matrix(
        (np.ones(int(keep.sum())), (op.pixel_a[keep], op.pixel_b[keep])), shape=(n, n)
    )
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        raise SingularSystemError(
            f"zero-weight rows cut the constraint graph into {n_comp} components; "
            "the gauge cannot fix every component's offset"
        )


def _relative_residual(a_mat, z: np.ndarray, b: np.ndarray) -> float:
    bnorm = float(np.linalg.norm(b))
    rnorm = float(np.linalg.norm(b - a_mat @ z))
    return rnorm / max(bnorm, np.finfo(float).tiny)


def solve_system(
    op: DifferenceOperator,
    gamma: np.ndarray,
    sigma: np.ndarray,
    cfg: SolveConfig,
) -> SystemSolution:
    """Minimize || diag(max(sigma, floor)) (P z - gamma) ||_2 under cfg.gauge.

    Shared backend for :func:`solve` and the tape-retaining variant; both
    therefore produce bit-identical solutions.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if gamma.shape != (op.n_rows,) or sigma.shape != (op.n_rows,):
        raise ValueError("gamma/sigma length must equal the operator row count")

    w = np.maximum(sigma, cfg.weight_floor) ** 2
    gauge = cfg.gauge
    n = op.n_pixels

    if not isinstance(gauge, TikhonovGauge) and w.min() <= 0.0:
        _check_connected(op, w)

    p_mat = op.matrix
    a_mat = (p_mat.T @ p_mat.multiply(w[:, None])).tocsc()
    b = apply_operator_transpose(op, w * gamma)

    if isinstance(gauge, AnchorGauge):
        if not (0 <= gauge.row < op.height and 0 <= gauge.col < op.width):
            raise ValueError("anchor pixel outside the grid")
        pin = gauge.row * op.width + gauge.col
        wa = gauge.weight**2
        a_mat = (a_mat + sp.csc_matrix(([wa], ([pin], [pin])), shape=(n, n))).tocsc()
        b[pin] += wa * gauge.value
    elif isinstance(gauge, TikhonovGauge):
        a_mat = (a_mat + gauge.mu * sp.identity(n, format="csc")).tocsc()

    if cfg.backend == "direct":
        z, resolve, reusable = _solve_direct(a_mat, b, gauge)
        iterations = 0
    else:
        z, resolve, iterations = _solve_cg(a_mat, b, gauge, cfg, n)
        reusable = False

    if isinstance(gauge, MeanGauge):
        z = z + (gauge.value - z.mean())

    if not np.all(np.isfinite(z)):
        raise SingularSystemError("solver produced non-finite values (singular system)")

    final_residual = _relative_residual(a_mat, z, b)
    return SystemSolution(
        op=op,
        cfg=cfg,
        sigma=sigma,
        w=w,
        z=z,
        residual_vec=gamma - apply_operator(op, z),
        iterations=iterations,
        final_residual=final_residual,
        resolve=resolve,
        reusable_factorization=reusable,
    )


def _solve_direct(a_mat, b, gauge):
    if isinstance(gauge, MeanGauge):
        # A is singular (constants); eliminate pixel 0, which picks the
        # exact minimizer with z[0] = 0, then the caller recenters. The
        # adjoint path must project its rhs onto range(A) = 1-perp first.
        reduced = a_mat[1:, :][:, 1:].tocsc()
        try:
            lu = splu(reduced)
        except RuntimeError as exc:
            raise SingularSystemError(f"sparse factorization failed: {exc}") from exc

        def resolve(rhs: np.ndarray) -> np.ndarray:
            centered = rhs - rhs.mean()
            out = np.zeros(a_mat.shape[0])
            out[1:] = lu.solve(centered[1:])
            return out

        z = np.zeros(a_mat.shape[0])
        z[1:] = lu.solve(b[1:])
        return z, resolve, True

    try:
        lu = splu(a_mat)
    except RuntimeError as exc:
        raise SingularSystemError(f"sparse factorization failed: {exc}") from exc
    return lu.solve(b), lu.solve, True


def _solve_cg(a_mat, b, gauge, cfg: SolveConfig, n: int):
    diag = a_mat.diagonal()
    if np.any(diag <= 0.0):
        raise SingularSystemError("zero diagonal in the normal matrix")
    precond = LinearOperator((n, n), matvec=lambda v: v / diag)
    maxiter = cfg.cg_max_iters if cfg.cg_max_iters is not None else 10 * n

    def run(rhs: np.ndarray) -> tuple[np.ndarray, int]:
        rhs = rhs - rhs.mean() if isinstance(gauge, MeanGauge) else rhs
        count = [0]

        def tick(_):
            count[0] += 1

        x, info = cg(a_mat, rhs, rtol=cfg.cg_tolerance, atol=0.0, maxiter=maxiter,
                     M=precond, callback=tick)
        if info > 0:
            rel = _relative_residual(a_mat, x, rhs)
            raise ConvergenceError(
                f"CG did not reach rtol {cfg.cg_tolerance:g} in {maxiter} iterations "
                f"(relative residual {rel:.3e})",
                residual=rel,
                iterations=count[0],
            )
        if info < 0:
            raise SolveError(f"CG failed with status {info}")
        return x, count[0]

    z, iterations = run(b)

    def resolve(rhs: np.ndarray) -> np.ndarray:
        return run(rhs)[0]

    return z, resolve, iterations


def _flatten_fields(grad: GradientField, conf: ConfidenceField):
    if grad.grid_shape != conf.grid_shape:
        raise ValueError(
            f"gradient grid {grad.grid_shape} != confidence grid {conf.grid_shape}"
        )
    gamma = np.concatenate([grad.gx.ravel(), grad.gy.ravel()])
    sigma = np.concatenate([conf.wx.ravel(), conf.wy.ravel()])
    return gamma, sigma


def solve(
    grad: GradientField,
    conf: ConfidenceField,
    cfg: SolveConfig = SolveConfig(),
) -> tuple[DepthMap, SolveDiagnostics]:
    """Recover the unscaled map minimizing the weighted difference residual.

    Returns a fully valid DepthMap plus solve diagnostics. Deterministic for
    a fixed config; see the module docstring for the gauge semantics.
    """
    height, width = grad.grid_shape
    op = build_operator(height, width)
    gamma, sigma = _flatten_fields(grad, conf)
    sol = solve_system(op, gamma, sigma, cfg)
    diag = SolveDiagnostics(
        iterations=sol.iterations,
        final_residual=sol.final_residual,
        factorization_reused=False,
    )
    return DepthMap.full(sol.z.reshape(height, width)), diag


def solve_stack(
    stack: ChannelStack, cfg: SolveConfig = SolveConfig()
) -> tuple[list[DepthMap], list[SolveDiagnostics]]:
    """Solve each channel independently; output order matches input order."""
    maps: list[DepthMap] = []
    diags: list[SolveDiagnostics] = []
    for k, (grad, conf) in enumerate(stack.channels):
        try:
            z, d = solve(grad, conf, cfg)
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"channel {k}: {exc}", residual=exc.residual, iterations=exc.iterations
            ) from exc
        except SolveError as exc:
            raise type(exc)(f"channel {k}: {exc}") from exc
        maps.append(z)
        diags.append(d)
    return maps, diags
