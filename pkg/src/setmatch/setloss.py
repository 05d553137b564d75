"""Aligned matching cost and the global set-prediction loss.

Given N predicted slots (class log-probabilities over K+1 classes, the last
one meaning background, plus a center-size box each) and M <= N ground-truth
objects, the global loss for a mapping s is

    total(s) = sum_j [ lc * (-logp[s(j), c_j] + logp[s(j), bg]) + box(b_j, bhat_s(j)) ]
               - lc * sum_i logp[i, bg]

where box(b, bhat) = l1_weight * |b - bhat|_1 + giou_weight * (1 - GIoU).
The bracketed per-pair term defines the cost-matrix entry, so minimising the
assignment cost minimises the loss: the matching and the loss are aligned by
construction.  The second sum depends on no mapping and is the background
part.

``baseline_cost_matrix`` provides the older matching rule (raw probability,
matched terms only) for comparison; it ranks mappings differently from the
loss, and ``find_misalignment_witness`` searches for a concrete instance
showing the disagreement.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assignment import AssignmentSolution, solve_rectangular
from .autodiff import Tensor

__all__ = [
    "GroundTruthSet",
    "PredictionSet",
    "LossConfig",
    "LossBreakdown",
    "MisalignmentWitness",
    "giou",
    "box_loss",
    "build_cost_matrix",
    "hungarian_loss_direct",
    "hungarian_loss_decomposed",
    "baseline_cost_matrix",
    "make_predictions",
    "random_boxes",
    "enumerate_loss_argmin",
    "iter_mappings",
    "find_misalignment_witness",
]


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    """M target objects: integer class labels and center-size boxes in [0, 1]."""

    classes: np.ndarray  # (M,) ints, never the background index
    boxes: np.ndarray  # (M, 4) as (cx, cy, w, h)

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.int64)
        boxes = np.asarray(self.boxes, dtype=np.float64)
        if classes.ndim != 1:
            raise ValueError("classes must be a vector")
        if boxes.shape != (classes.shape[0], 4):
            raise ValueError(f"boxes must have shape ({classes.shape[0]}, 4)")
        if np.any(classes < 0):
            raise ValueError("class labels must be non-negative")
        if boxes.size:
            if np.any(boxes[:, 2:] <= 0):
                raise ValueError("box widths and heights must be positive")
            if np.any(boxes < 0) or np.any(boxes > 1):
                raise ValueError("box coordinates must lie in [0, 1]")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "boxes", boxes)

    @property
    def m(self) -> int:
        return self.classes.shape[0]


@dataclass(eq=False)
class PredictionSet:
    """N predicted slots: class log-probabilities (background last) and boxes."""

    class_logprobs: Tensor  # (N, K+1)
    boxes: Tensor  # (N, 4) center-size in [0, 1]

    def __post_init__(self):
        lp = self.class_logprobs.values
        bx = self.boxes.values
        if lp.ndim != 2 or lp.shape[1] < 2:
            raise ValueError("class_logprobs must be (N, K+1) with K >= 1")
        if bx.shape != (lp.shape[0], 4):
            raise ValueError(f"boxes must have shape ({lp.shape[0]}, 4)")
        rowsum = np.exp(lp).sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > 1e-12):
            raise ValueError("each row of exp(class_logprobs) must sum to 1")
        if np.any(bx < 0) or np.any(bx > 1):
            raise ValueError("predicted box coordinates must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.class_logprobs.values.shape[0]

    @property
    def num_classes(self) -> int:
        """K, the number of real (non-background) classes."""
        return self.class_logprobs.values.shape[1] - 1

    def detach(self) -> "PredictionSet":
        return PredictionSet(self.class_logprobs.detach(), self.boxes.detach())


@dataclass(frozen=True)
class LossConfig:
    """Shared weights for the cost matrix and the loss.

    The same weights appear in both places; that is what keeps the matching
    aligned with the loss.  ``lambda_class`` multiplies every class
    cross-entropy term, the background part included, so the decomposition
    identity holds for any weight choice.
    """

    lambda_class: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        if self.lambda_class < 0 or self.lambda_l1 < 0 or self.lambda_giou < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(eq=False)
class LossBreakdown:
    """Scalar loss tensors: total = assign_part + background_part.

    ``class_part`` and ``box_part`` split ``assign_part`` for diagnostics.
    """

    total: Tensor
    assign_part: Tensor
    background_part: Tensor
    class_part: Tensor
    box_part: Tensor


def make_predictions(class_logits, boxes) -> PredictionSet:
    """Detached prediction set from raw class logits and box values in [0, 1]."""
    lp = ad.log_softmax(ad.constant(class_logits))
    return PredictionSet(lp, ad.constant(boxes))


# ---------------------------------------------------------------------------
# box geometry
# ---------------------------------------------------------------------------


def _giou_parts(px, py, pw, ph, qx, qy, qw, qh) -> Tensor:
    """Elementwise generalized IoU of center-size boxes.

    GIoU = IoU - (enclosing - union) / enclosing, in [-1, 1].  Overlap widths
    are clamped at zero with subgradient 0 on the boundary.
    """
    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5
    qx1, qx2 = qx - qw * 0.5, qx + qw * 0.5
    qy1, qy2 = qy - qh * 0.5, qy + qh * 0.5

    iw = ad.relu(ad.minimum(px2, qx2) - ad.maximum(px1, qx1))
    ih = ad.relu(ad.minimum(py2, qy2) - ad.maximum(py1, qy1))
    inter = iw * ih
    union = pw * ph + qw * qh - inter

    ew = ad.maximum(px2, qx2) - ad.minimum(px1, qx1)
    eh = ad.maximum(py2, qy2) - ad.minimum(py1, qy1)
    enclosing = ew * eh

    return inter / union - (enclosing - union) / enclosing


def _split_box(box) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    t = box if isinstance(box, Tensor) else ad.constant(box)
    if t.values.shape != (4,):
        raise ValueError("a box is a length-4 vector (cx, cy, w, h)")
    return tuple(ad.reshape(ad.gather(t, [k]), ()) for k in range(4))


def _check_box_area(box) -> None:
    v = box.values if isinstance(box, Tensor) else np.asarray(box, dtype=np.float64)
    if v[2] <= 0 or v[3] <= 0:
        raise ValueError("degenerate box: width and height must be positive")


def giou(box_a, box_b) -> Tensor:
    """Generalized IoU of two center-size boxes; symmetric, in [-1, 1]."""
    _check_box_area(box_a)
    _check_box_area(box_b)
    ax, ay, aw, ah = _split_box(box_a)
    bx, by, bw, bh = _split_box(box_b)
    return _giou_parts(ax, ay, aw, ah, bx, by, bw, bh)


def box_loss(b, b_hat, cfg: LossConfig) -> Tensor:
    """L1-plus-GIoU box loss of prediction ``b_hat`` against target ``b``."""
    bt = b if isinstance(b, Tensor) else ad.constant(b)
    pt = b_hat if isinstance(b_hat, Tensor) else ad.constant(b_hat)
    l1 = ad.tensor_sum(ad.absolute(pt - bt))
    return cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - giou(bt, pt))


# ---------------------------------------------------------------------------
# cost matrix and losses
# ---------------------------------------------------------------------------


def _check_instance(preds: PredictionSet, gts: GroundTruthSet) -> None:
    if gts.m > preds.n:
        raise ValueError(f"more targets than prediction slots ({gts.m} > {preds.n})")
    if gts.m and np.any(gts.classes >= preds.num_classes):
        raise ValueError("ground-truth class label out of range (hits background index)")


def _pair_indices(n: int, m: int, k1: int, classes: np.ndarray):
    """Flat gather indices for every (slot i, target j) pair, row-major in i."""
    i = np.repeat(np.arange(n), m)
    j = np.tile(np.arange(m), n)
    cls_idx = i * k1 + classes[j]
    bg_idx = i * k1 + (k1 - 1)
    return i, j, cls_idx, bg_idx


def _cost_components(preds: PredictionSet, gts: GroundTruthSet, cfg: LossConfig):
    """Class and box cost matrices as (N, M) tensors, gradient-attached."""
    n, m = preds.n, gts.m
    k1 = preds.num_classes + 1
    i, j, cls_idx, bg_idx = _pair_indices(n, m, k1, gts.classes)

    lp = preds.class_logprobs
    class_flat = cfg.lambda_class * (ad.gather(lp, bg_idx) - ad.gather(lp, cls_idx))

    coords = [ad.gather(preds.boxes, i * 4 + k) for k in range(4)]
    gt = gts.boxes[j]
    gx, gy, gw, gh = (ad.constant(gt[:, k]) for k in range(4))
    targets = (gx, gy, gw, gh)
    l1 = sum(ad.absolute(coords[k] - targets[k]) for k in range(4))
    g = _giou_parts(coords[0], coords[1], coords[2], coords[3], gx, gy, gw, gh)
    box_flat = cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - g)

    return ad.reshape(class_flat, (n, m)), ad.reshape(box_flat, (n, m))


def build_cost_matrix(preds: PredictionSet, gts: GroundTruthSet, cfg: LossConfig) -> Tensor:
    """The (N, M) aligned cost matrix as a gradient-attached tensor.

    Entry (i, j) is the contribution of matching slot i to target j relative
    to slot i predicting background, so entries can be negative.
    """
    _check_instance(preds, gts)
    class_mat, box_mat = _cost_components(preds, gts, cfg)
    return class_mat + box_mat


def _background_part(preds: PredictionSet, cfg: LossConfig) -> Tensor:
    k1 = preds.num_classes + 1
    bg_all = np.arange(preds.n) * k1 + (k1 - 1)
    return -cfg.lambda_class * ad.tensor_sum(ad.gather(preds.class_logprobs, bg_all))


def _resolve_mapping(s, n: int, m: int) -> tuple[int, ...]:
    mapping = tuple(int(r) for r in (s.mapping if isinstance(s, AssignmentSolution) else s))
    if len(mapping) != m:
        raise ValueError(f"mapping must assign all {m} targets")
    if len(set(mapping)) != len(mapping):
        raise ValueError("mapping must be injective")
    if any(r < 0 or r >= n for r in mapping):
        raise ValueError("mapping row index out of range")
    return mapping


def hungarian_loss_direct(preds: PredictionSet, gts: GroundTruthSet, s, cfg: LossConfig) -> LossBreakdown:
    """Global loss for a given mapping, evaluated term by term.

    The mapping need not be optimal.  Each matched pair contributes its class
    log-ratio and box terms; every slot contributes its background
    log-probability.
    """
    _check_instance(preds, gts)
    mapping = _resolve_mapping(s, preds.n, gts.m)
    k1 = preds.num_classes + 1
    lp = preds.class_logprobs

    class_part = ad.constant(0.0)
    box_part = ad.constant(0.0)
    for j, r in enumerate(mapping):
        match_lp = ad.reshape(ad.gather(lp, [r * k1 + int(gts.classes[j])]), ())
        bg_lp = ad.reshape(ad.gather(lp, [r * k1 + (k1 - 1)]), ())
        class_part = class_part + cfg.lambda_class * (bg_lp - match_lp)
        pred_box = ad.reshape(ad.gather(preds.boxes, r * 4 + np.arange(4)), (4,))
        box_part = box_part + box_loss(gts.boxes[j], pred_box, cfg)

    assign_part = class_part + box_part
    background_part = _background_part(preds, cfg)
    total = assign_part + background_part
    return LossBreakdown(total, assign_part, background_part, class_part, box_part)


def hungarian_loss_decomposed(
    preds: PredictionSet, gts: GroundTruthSet, cfg: LossConfig
) -> tuple[AssignmentSolution, LossBreakdown]:
    """Optimal-mapping loss via the assignment decomposition.

    Builds the cost tensor, solves the assignment on its detached numeric
    values, then sums the selected gradient-attached entries and adds the
    background part.  Backpropagating through the returned total treats the
    chosen selector as a constant: each selected cost entry receives unit
    upstream gradient.
    """
    _check_instance(preds, gts)
    n, m = preds.n, gts.m
    class_mat, box_mat = _cost_components(preds, gts, cfg)
    cost = class_mat + box_mat
    sol = solve_rectangular(cost.values)
    sel = np.array([r * m + j for j, r in enumerate(sol.mapping)], dtype=np.intp)
    assign_part = ad.tensor_sum(ad.gather(cost, sel))
    background_part = _background_part(preds, cfg)
    total = assign_part + background_part
    breakdown = LossBreakdown(
        total,
        assign_part,
        background_part,
        ad.tensor_sum(ad.gather(class_mat, sel)),
        ad.tensor_sum(ad.gather(box_mat, sel)),
    )
    return sol, breakdown


def baseline_cost_matrix(preds: PredictionSet, gts: GroundTruthSet, cfg: LossConfig) -> np.ndarray:
    """The original matching cost: raw class probability plus box terms.

    Entry (i, j) is ``-lambda_class * p_i(c_j) + box(b_j, bhat_i)``; there is
    no background correction and no gradient attachment.  Provided only for
    comparison runs: its ranking of mappings disagrees with the global loss
    on some instances.
    """
    _check_instance(preds, gts)
    detached = preds.detach()
    _, box_mat = _cost_components(detached, gts, cfg)
    probs = np.exp(detached.class_logprobs.values)
    class_mat = -cfg.lambda_class * probs[:, gts.classes].reshape(preds.n, gts.m)
    return class_mat + box_mat.values


# ---------------------------------------------------------------------------
# enumeration utilities and the misalignment witness
# ---------------------------------------------------------------------------


def iter_mappings(n: int, m: int):
    """All injective column-to-row mappings, in lexicographic order."""
    return itertools.permutations(range(n), m)


def enumerate_loss_argmin(
    preds: PredictionSet, gts: GroundTruthSet, cfg: LossConfig
) -> tuple[tuple[int, ...], float]:
    """Argmin of the global loss over every injective mapping (small instances)."""
    detached = preds.detach()
    best_map: tuple[int, ...] | None = None
    best = np.inf
    for mapping in iter_mappings(preds.n, gts.m):
        val = float(hungarian_loss_direct(detached, gts, mapping, cfg).total)
        if val < best:
            best = val
            best_map = mapping
    if best_map is None:
        return (), float(hungarian_loss_direct(detached, gts, (), cfg).total)
    return best_map, best


@dataclass(frozen=True)
class MisalignmentWitness:
    """A concrete instance where the baseline matching picks a worse mapping.

    ``baseline_mapping`` minimises the baseline cost, ``optimal_mapping``
    minimises the global loss, and the loss at the former is strictly larger.
    """

    class_logits: np.ndarray
    boxes: np.ndarray
    gt_classes: np.ndarray
    gt_boxes: np.ndarray
    baseline_mapping: tuple[int, ...]
    optimal_mapping: tuple[int, ...]
    baseline_loss: float
    optimal_loss: float

    def as_dict(self) -> dict:
        return {
            "class_logits": self.class_logits.tolist(),
            "boxes": self.boxes.tolist(),
            "gt_classes": self.gt_classes.tolist(),
            "gt_boxes": self.gt_boxes.tolist(),
            "baseline_mapping": list(self.baseline_mapping),
            "optimal_mapping": list(self.optimal_mapping),
            "baseline_loss": self.baseline_loss,
            "optimal_loss": self.optimal_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MisalignmentWitness":
        return cls(
            class_logits=np.asarray(d["class_logits"], dtype=np.float64),
            boxes=np.asarray(d["boxes"], dtype=np.float64),
            gt_classes=np.asarray(d["gt_classes"], dtype=np.int64),
            gt_boxes=np.asarray(d["gt_boxes"], dtype=np.float64),
            baseline_mapping=tuple(d["baseline_mapping"]),
            optimal_mapping=tuple(d["optimal_mapping"]),
            baseline_loss=float(d["baseline_loss"]),
            optimal_loss=float(d["optimal_loss"]),
        )

    def instance(self) -> tuple["PredictionSet", GroundTruthSet]:
        preds = make_predictions(self.class_logits, self.boxes)
        gts = GroundTruthSet(self.gt_classes, self.gt_boxes)
        return preds, gts


def random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    """Valid random center-size boxes, fully inside the unit square."""
    boxes = np.empty((count, 4))
    boxes[:, 2:] = rng.uniform(0.1, 0.5, size=(count, 2))
    boxes[:, 0] = rng.uniform(boxes[:, 2] / 2, 1 - boxes[:, 2] / 2)
    boxes[:, 1] = rng.uniform(boxes[:, 3] / 2, 1 - boxes[:, 3] / 2)
    return boxes


def find_misalignment_witness(
    seed: int = 0,
    cfg: LossConfig | None = None,
    max_trials: int = 5000,
    margin: float = 1e-6,
) -> MisalignmentWitness:
    """Randomised search for an instance where baseline matching is suboptimal.

    Small instances (up to 5 slots, 3 targets) are sampled until the argmin
    of the baseline cost differs from the enumeration argmin of the global
    loss by more than ``margin``.  Deterministic given ``seed``.
    """
    cfg = cfg or LossConfig()
    rng = np.random.default_rng(seed)
    for _ in range(max_trials):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(1, min(3, n) + 1))
        k = int(rng.integers(2, 5))
        logits = rng.uniform(-3.0, 3.0, size=(n, k + 1))
        boxes = random_boxes(rng, n)
        gts = GroundTruthSet(rng.integers(0, k, size=m), random_boxes(rng, m))
        preds = make_predictions(logits, boxes)
        base_sol = solve_rectangular(baseline_cost_matrix(preds, gts, cfg))
        opt_map, opt_loss = enumerate_loss_argmin(preds, gts, cfg)
        if base_sol.mapping == opt_map:
            continue
        base_loss = float(hungarian_loss_direct(preds, gts, base_sol.mapping, cfg).total)
        if base_loss > opt_loss + margin:
            return MisalignmentWitness(
                class_logits=logits,
                boxes=boxes,
                gt_classes=gts.classes,
                gt_boxes=gts.boxes,
                baseline_mapping=base_sol.mapping,
                optimal_mapping=opt_map,
                baseline_loss=base_loss,
                optimal_loss=opt_loss,
            )
    raise RuntimeError(f"no misalignment witness found in {max_trials} trials")
