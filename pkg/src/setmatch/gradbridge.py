"""Gradients of the optimal assignment cost, with certification utilities.

The optimal-cost map is piecewise smooth in the cost entries: on the open
region where the optimal selector is unchanged it is linear, and its
generalized gradient is obtained by holding the selector constant.  In tape
terms that means solving on detached numeric values and then gathering the
selected gradient-attached entries, so backward deposits gradient one on
exactly the M chosen cost entries and zero elsewhere.

``certify_gradient`` checks the analytic gradient of the full decomposed loss
against central finite differences, re-solving the assignment at every probe
point; when a probe changes the mapping the comparison is inconclusive rather
than failed, because the generalized gradient is only a classical one while
the selector stays put.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .assignment import AssignmentSolution, is_degenerate, solve_rectangular
from .autodiff import Tensor, backward, finite_diff_gradient
from .setloss import (
    GroundTruthSet,
    LossConfig,
    PredictionSet,
    build_cost_matrix,
    hungarian_loss_decomposed,
    random_boxes,
)

__all__ = [
    "GradCheckReport",
    "assignment_cost_with_grad",
    "certify_gradient",
    "direct_parameter_head",
    "sample_gradcheck_instance",
]


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one analytic-versus-finite-difference comparison.

    ``stability_flag`` is true when every probe point reproduced the base
    mapping; without it the comparison is inconclusive rather than failed.
    ``within_tolerance`` applies the per-coordinate rule
    |analytic - numeric| <= max(abs_floor, rel_tol * max(|analytic|, |numeric|)).
    """

    max_relative_error: float
    max_absolute_error: float
    degenerate_flag: bool
    stability_flag: bool
    within_tolerance: bool
    mapping: tuple[int, ...]

    @property
    def conclusive(self) -> bool:
        return self.stability_flag and not self.degenerate_flag

    @property
    def ok(self) -> bool:
        """Tolerance met, or comparison inconclusive (never counted as failure)."""
        return self.within_tolerance or not self.conclusive


def assignment_cost_with_grad(cost: Tensor) -> tuple[AssignmentSolution, Tensor]:
    """Solve on detached values, then re-select entries with gradient attached.

    The returned scalar equals the optimal total cost; backpropagating it
    places unit gradient on the M selected entries of ``cost`` and nothing on
    the rest, which is exactly the constant-selector gradient.
    """
    sol = solve_rectangular(cost.values)
    m = cost.values.shape[1]
    sel = np.array([r * m + j for j, r in enumerate(sol.mapping)], dtype=np.intp)
    return sol, ad.tensor_sum(ad.gather(cost, sel))


def direct_parameter_head(n_slots: int, num_classes: int) -> tuple[Callable[[Tensor], PredictionSet], int]:
    """A minimal prediction head driven by one flat parameter vector.

    The first ``n_slots * (num_classes + 1)`` entries are class logits, the
    remaining ``n_slots * 4`` are box logits squashed by sigmoid.  Returns
    the builder and the parameter count.
    """
    k1 = num_classes + 1
    n_logits = n_slots * k1
    count = n_logits + n_slots * 4

    def build(params: Tensor) -> PredictionSet:
        if params.values.shape != (count,):
            raise ValueError(f"expected {count} parameters, got shape {params.values.shape}")
        logits = ad.reshape(ad.gather(params, np.arange(n_logits)), (n_slots, k1))
        box_logits = ad.reshape(ad.gather(params, n_logits + np.arange(n_slots * 4)), (n_slots, 4))
        return PredictionSet(ad.log_softmax(logits), ad.sigmoid(box_logits))

    return build, count


def _corner_edges(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes.T
    return np.stack([cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2], axis=1)


def _kink_distance(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> float:
    """Distance from the nearest non-smooth point of the pairwise box loss.

    The box loss has derivative jumps where a coordinate difference changes
    sign, where a prediction edge crosses a target edge, and where two boxes
    stop overlapping.  The minimum over all pairs of all those margins tells
    how far finite-difference probes can move before crossing a kink.
    """
    d_coord = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :])
    pe = _corner_edges(pred_boxes)
    ge = _corner_edges(gt_boxes)
    d_edge = np.abs(pe[:, None, :] - ge[None, :, :])
    iw = np.minimum(pe[:, None, 1], ge[None, :, 1]) - np.maximum(pe[:, None, 0], ge[None, :, 0])
    ih = np.minimum(pe[:, None, 3], ge[None, :, 3]) - np.maximum(pe[:, None, 2], ge[None, :, 2])
    candidates = [d_coord.min(), d_edge.min(), np.abs(iw).min(), np.abs(ih).min()]
    return float(min(candidates)) if pred_boxes.size and gt_boxes.size else np.inf


def sample_gradcheck_instance(
    rng: np.random.Generator,
    n_slots: int,
    m: int,
    num_classes: int,
    margin: float = 2e-4,
    max_resamples: int = 200,
):
    """Random parameters and targets in generic position for gradient checks.

    Instances whose box geometry sits within ``margin`` of a kink of the box
    loss are resampled, so central differences with the default step stay on
    one smooth piece (a probe of 1e-4 moves any box edge by well under 4e-5).
    Mapping ties are still possible; certify_gradient reports those itself.
    """
    _, count = direct_parameter_head(n_slots, num_classes)
    n_logits = n_slots * (num_classes + 1)
    for _ in range(max_resamples):
        params = rng.normal(0.0, 1.0, size=count)
        gts = GroundTruthSet(rng.integers(0, num_classes, size=m), random_boxes(rng, m))
        box_logits = params[n_logits:].reshape(n_slots, 4)
        boxes = 1.0 / (1.0 + np.exp(-box_logits))
        if _kink_distance(boxes, gts.boxes) > margin:
            return params, gts
    raise RuntimeError("no generic-position instance found; margin too large")


def certify_gradient(
    preds_builder: Callable[[Tensor], PredictionSet],
    gts: GroundTruthSet,
    cfg: LossConfig,
    params,
    step: float = 1e-4,
    degeneracy_tolerance: float = 1e-9,
    abs_floor: float = 1e-6,
    rel_tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the analytic loss gradient with central finite differences.

    The analytic side runs one forward/backward pass of the decomposed loss.
    The numeric side re-evaluates the loss at every probe point, re-solving
    the assignment each time; any change of mapping clears the stability
    flag.  Degeneracy of the base cost matrix is reported separately.
    """
    x0 = np.array(params.values if isinstance(params, Tensor) else params, dtype=np.float64)

    tape = ad.Tape()
    leaf = tape.leaf(x0)
    preds = preds_builder(leaf)
    sol, breakdown = hungarian_loss_decomposed(preds, gts, cfg)
    analytic = backward(breakdown.total).array(leaf)
    base_mapping = sol.mapping

    cost_values = build_cost_matrix(preds.detach(), gts, cfg).values
    degenerate = is_degenerate(cost_values, degeneracy_tolerance).degenerate

    stable = True

    def objective(x: np.ndarray) -> float:
        nonlocal stable
        probe_sol, probe_bd = hungarian_loss_decomposed(preds_builder(ad.constant(x)), gts, cfg)
        if probe_sol.mapping != base_mapping:
            stable = False
        return float(probe_bd.total)

    numeric = finite_diff_gradient(objective, x0, step).values

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    max_abs = float(diff.max()) if diff.size else 0.0
    rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
    max_rel = float(rel.max()) if rel.size else 0.0
    within = bool(np.all(diff <= np.maximum(abs_floor, rel_tol * denom)))
    return GradCheckReport(max_rel, max_abs, degenerate, stable, within, base_mapping)
