"""Derivative-free optimization with a residual-network surrogate.

The package bundles three layers: noisy black-box plumbing with an
evaluation ledger (`blackbox`), stencil geometry (`stencil`), the
surrogate network with hand-written gradients (`surrogate`), the search
engines (`optimize`), a toy coverage-directed-generation problem on an
abstract processor pipeline (`cdg`), and a command line front end
(`cli`).
"""

from .blackbox import (
    EvaluationRecord,
    Ledger,
    NoiseSpec,
    Objective,
    evaluate,
    evaluate_batch,
    history_snapshot,
    load_history,
    noise_samples,
    noisy_wrap,
    optimality_gap,
    rosenbrock,
    rosenbrock_objective,
    save_history,
    true_value,
)
from .errors import (
    BudgetExhausted,
    DimensionMismatch,
    DnnaifError,
    EmptyInput,
    InvalidInput,
    NonFiniteLoss,
)
from .optimize import (
    DNNAIFConfig,
    ExplorationSchedule,
    IFConfig,
    IterationTrace,
    OptimizerState,
    dnn_only,
    dnnaif,
    exploration_schedule,
    filtered_sampling,
    implicit_filtering,
    surrogate_descent,
)
from .stencil import (
    DirectionSet,
    Stencil,
    coordinate_directions,
    is_positive_spanning,
    kappa_coordinate,
    noise_local_norm,
    rademacher_directions,
    sphere_directions,
    stencil_failure_bound,
    stencil_points,
)
from .surrogate import (
    Architecture,
    NetworkParams,
    TrainingConfig,
    forward,
    grad_theta,
    grad_x,
    init_network,
    load_params,
    loss,
    save_params,
    surrogate_value,
    surrogate_values,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "BudgetExhausted",
    "DNNAIFConfig",
    "DimensionMismatch",
    "DirectionSet",
    "DnnaifError",
    "EmptyInput",
    "EvaluationRecord",
    "ExplorationSchedule",
    "IFConfig",
    "InvalidInput",
    "IterationTrace",
    "Ledger",
    "NetworkParams",
    "NoiseSpec",
    "NonFiniteLoss",
    "Objective",
    "OptimizerState",
    "Stencil",
    "TrainingConfig",
    "coordinate_directions",
    "dnn_only",
    "dnnaif",
    "evaluate",
    "evaluate_batch",
    "exploration_schedule",
    "filtered_sampling",
    "history_snapshot",
    "implicit_filtering",
    "init_network",
    "is_positive_spanning",
    "kappa_coordinate",
    "forward",
    "grad_theta",
    "grad_x",
    "load_history",
    "load_params",
    "loss",
    "noise_local_norm",
    "noise_samples",
    "optimality_gap",
    "save_history",
    "save_params",
    "surrogate_value",
    "true_value",
    "noisy_wrap",
    "rademacher_directions",
    "rosenbrock",
    "rosenbrock_objective",
    "sphere_directions",
    "stencil_failure_bound",
    "stencil_points",
    "surrogate_descent",
    "surrogate_values",
    "train",
]
