"""Analytic differentiation through the weighted difference solve.

The solution z* of the gauged normal system A z = b is an implicit function
of the target differences gamma and confidences sigma. For a scalar loss L
with downstream gradient gbar = dL/dz, one adjoint solve lam = A^-1 gbar
(same symmetric matrix as the forward pass, so a direct factorization is
reused) yields

    dL/dgamma_r = w_r * (P lam)_r
    dL/dw_r     = (P lam)_r * r_r          with r = gamma - P z*
    dL/dsigma_r = 2 sigma_r * dL/dw_r      (zero where the weight floor binds)

Gauge rows carry no gamma/sigma gradient. Under the mean gauge the forward
map recenters the solution, so the adjoint right-hand side is projected to
zero mean before the solve; the projection is folded into the tape's
resolve callable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ConfidenceField, DepthMap, GradientField
from .solver import (
    DifferenceOperator,
    SolveConfig,
    SystemSolution,
    apply_operator,
    build_operator,
    solve_system,
)

__all__ = ["SolveTape", "SolveGradients", "solve_with_tape", "solve_backward"]


@dataclass(eq=False)
class SolveTape:
    """Adjoint state of one solve: weights, residual, solution, and the
    retained factorization (or CG context)."""

    op: DifferenceOperator
    cfg: SolveConfig
    sigma: np.ndarray
    w: np.ndarray
    z: np.ndarray
    residual_vec: np.ndarray
    _resolve: object
    backend: str
    reusable: bool
    factorization_reused: bool = False

    @classmethod
    def from_solution(cls, sol: SystemSolution) -> "SolveTape":
        return cls(
            op=sol.op,
            cfg=sol.cfg,
            sigma=sol.sigma,
            w=sol.w,
            z=sol.z,
            residual_vec=sol.residual_vec,
            _resolve=sol.resolve,
            backend=sol.cfg.backend,
            reusable=sol.reusable_factorization,
        )


@dataclass(frozen=True, eq=False)
class SolveGradients:
    """dL/dgamma and dL/dsigma split back into compact field shapes."""

    gamma_x: np.ndarray
    gamma_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray


def solve_with_tape(
    grad: GradientField,
    conf: ConfidenceField,
    cfg: SolveConfig = SolveConfig(),
) -> tuple[DepthMap, SolveTape]:
    """Identical to :func:`gradepth.solver.solve` (same code path, bit for
    bit) but additionally returns the adjoint tape."""
    if grad.grid_shape != conf.grid_shape:
        raise ValueError(
            f"gradient grid {grad.grid_shape} != confidence grid {conf.grid_shape}"
        )
    height, width = grad.grid_shape
    op = build_operator(height, width)
    gamma = np.concatenate([grad.gx.ravel(), grad.gy.ravel()])
    sigma = np.concatenate([conf.wx.ravel(), conf.wy.ravel()])
    sol = solve_system(op, gamma, sigma, cfg)
    return DepthMap.full(sol.z.reshape(height, width)), SolveTape.from_solution(sol)


def solve_backward(tape: SolveTape, gbar: np.ndarray) -> SolveGradients:
    """Pull a downstream gradient gbar = dL/dz back onto gamma and sigma."""
    gbar = np.asarray(gbar, dtype=np.float64)
    if gbar.shape != (tape.op.n_pixels,):
        raise ValueError(
            f"expected flat gradient of length {tape.op.n_pixels}, got {gbar.shape}"
        )
    lam = tape._resolve(gbar)
    if tape.reusable:
        tape.factorization_reused = True

    plam = apply_operator(tape.op, lam)
    dgamma = tape.w * plam
    dw = plam * tape.residual_vec
    dsigma = 2.0 * tape.sigma * dw
    dsigma[tape.sigma <= tape.cfg.weight_floor] = 0.0

    height, width = tape.op.height, tape.op.width
    n_x = tape.op.n_x
    return SolveGradients(
        gamma_x=dgamma[:n_x].reshape(height, width - 1),
        gamma_y=dgamma[n_x:].reshape(height - 1, width),
        sigma_x=dsigma[:n_x].reshape(height, width - 1),
        sigma_y=dsigma[n_x:].reshape(height - 1, width),
    )
