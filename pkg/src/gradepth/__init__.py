"""gradepth: gradient-domain depth reconstruction at desk scale.

Recover dense depth from per-pixel difference targets and confidences via a
sparse weighted least-squares solve, differentiate through the solve with
the adjoint method, and train a miniature end-to-end pipeline on synthetic
scenes with scale-invariant losses and standard depth metrics.
"""

__version__ = "0.1.0"

from .adjoint import SolveGradients, SolveTape, solve_backward, solve_with_tape
from .grid import (
    ChannelStack,
    ConfidenceField,
    DepthMap,
    GradientField,
    SceneSpec,
    exact_gradients,
    observe_gradients,
    random_pool_pair,
    synth_scene,
)
from .losses import LossConfig, depth_loss, total_loss, variational_loss
from .metrics import MetricsReport, align_scale_shift, evaluate, metric_layer_apply
from .solver import (
    AnchorGauge,
    ConvergenceError,
    DifferenceOperator,
    GaugeMode,
    MeanGauge,
    SingularSystemError,
    SolveConfig,
    SolveDiagnostics,
    SolveError,
    TikhonovGauge,
    apply_operator,
    apply_operator_transpose,
    build_operator,
    solve,
    solve_stack,
)

__all__ = [
    "__version__",
    "ChannelStack",
    "ConfidenceField",
    "DepthMap",
    "GradientField",
    "SceneSpec",
    "exact_gradients",
    "observe_gradients",
    "random_pool_pair",
    "synth_scene",
    "AnchorGauge",
    "MeanGauge",
    "TikhonovGauge",
    "GaugeMode",
    "SolveConfig",
    "SolveDiagnostics",
    "SolveError",
    "SingularSystemError",
    "ConvergenceError",
    "DifferenceOperator",
    "build_operator",
    "apply_operator",
    "apply_operator_transpose",
    "solve",
    "solve_stack",
    "SolveTape",
    "SolveGradients",
    "solve_with_tape",
    "solve_backward",
    "LossConfig",
    "depth_loss",
    "variational_loss",
    "total_loss",
    "MetricsReport",
    "evaluate",
    "align_scale_shift",
    "metric_layer_apply",
]
