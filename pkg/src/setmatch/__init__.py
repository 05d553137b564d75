"""setmatch: set-prediction loss with a solver-aligned matching cost.

The global loss splits into a mapping-independent background term and an
assignment cost whose matrix entries are the per-pair loss contributions, so
the optimal matching also minimises the loss, and the gradient of the optimal
assignment cost follows by holding the chosen selector constant.
"""

from .assignment import (
    AssignmentSolution,
    brute_force_assignment,
    is_degenerate,
    pad_square,
    solve_rectangular,
)
from .autodiff import Tape, Tensor, backward, constant, finite_diff_gradient
from .gradbridge import GradCheckReport, assignment_cost_with_grad, certify_gradient
from .setloss import (
    GroundTruthSet,
    LossBreakdown,
    LossConfig,
    PredictionSet,
    baseline_cost_matrix,
    box_loss,
    build_cost_matrix,
    find_misalignment_witness,
    giou,
    hungarian_loss_decomposed,
    hungarian_loss_direct,
    make_predictions,
)
from .toytask import ModelParams, Scene, SceneConfig, generate_scene, model_forward
from .trainer import MetricsRow, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AssignmentSolution",
    "brute_force_assignment",
    "is_degenerate",
    "pad_square",
    "solve_rectangular",
    "Tape",
    "Tensor",
    "backward",
    "constant",
    "finite_diff_gradient",
    "GradCheckReport",
    "assignment_cost_with_grad",
    "certify_gradient",
    "GroundTruthSet",
    "LossBreakdown",
    "LossConfig",
    "PredictionSet",
    "baseline_cost_matrix",
    "box_loss",
    "build_cost_matrix",
    "find_misalignment_witness",
    "giou",
    "hungarian_loss_decomposed",
    "hungarian_loss_direct",
    "make_predictions",
    "ModelParams",
    "Scene",
    "SceneConfig",
    "generate_scene",
    "model_forward",
    "MetricsRow",
    "TrainConfig",
    "evaluate",
    "train",
]
