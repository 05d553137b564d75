"""Training loop for the toy task, under either matching strategy.

``aligned`` mode matches with the cost matrix whose total equals the loss
being minimised; ``baseline`` mode matches with the raw-probability cost and
then minimises the same global loss at that mapping.  Batches are summed
over scenes with no per-box normalisation, so scenes with more boxes weigh
more, by design.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .assignment import is_degenerate, solve_rectangular
from .autodiff import Tape, backward
from .seeding import substream
from .setloss import (
    GroundTruthSet,
    LossConfig,
    PredictionSet,
    baseline_cost_matrix,
    build_cost_matrix,
    hungarian_loss_decomposed,
    hungarian_loss_direct,
)
from .toytask import (
    ModelParams,
    SceneConfig,
    attach_params,
    format_scene_record,
    generate_scene,
    init_params,
    model_forward,
    param_gradients,
)

__all__ = [
    "TrainConfig",
    "MetricsRow",
    "NonFiniteLossError",
    "train",
    "evaluate",
    "write_metrics_csv",
    "metrics_to_csv",
]

logger = logging.getLogger(__name__)

LOSS_MODES = ("aligned", "baseline")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss_mode: str = "aligned"
    seed: int = 0
    eval_every: int = 100
    hidden_width: int = 128
    clip_norm: float | None = 1.0  # None disables gradient clipping
    loss: LossConfig = field(default_factory=LossConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or None to disable)")


@dataclass(frozen=True)
class MetricsRow:
    """Per-step training metrics; loss fields are sums over the batch."""

    step: int
    loss_total: float
    loss_assign: float
    loss_background: float
    loss_class: float
    loss_box: float
    mean_matched_iou: float
    class_accuracy: float
    degeneracy_rate: float


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


class NonFiniteLossError(RuntimeError):
    """Raised when a batch produces a non-finite loss; carries the batch dump."""

    def __init__(self, step: int, records: list[str]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.records = records


def _iou_values(a: np.ndarray, b: np.ndarray) -> float:
    """Plain IoU of two center-size boxes, on numbers only."""
    ax1, ax2 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay1, ay2 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx1, bx2 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by1, by2 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def _matched_quality(preds: PredictionSet, gts: GroundTruthSet, mapping) -> tuple[list[float], list[bool]]:
    """IoUs and foreground-argmax correctness for each matched pair."""
    lp = preds.class_logprobs.values
    boxes = preds.boxes.values
    k = preds.num_classes
    ious = []
    correct = []
    for j, r in enumerate(mapping):
        ious.append(_iou_values(boxes[r], gts.boxes[j]))
        correct.append(int(np.argmax(lp[r, :k])) == int(gts.classes[j]))
    return ious, correct


class _Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, a in arrays.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(a))
            v = self.v.get(name, np.zeros_like(a))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            out[name] = a - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays, grads):
        return {name: a - self.lr * grads[name] for name, a in arrays.items()}


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def _scene_loss(preds: PredictionSet, gts: GroundTruthSet, loss_cfg: LossConfig, mode: str):
    """Per-mode loss: returns (solution, breakdown, matcher cost values)."""
    if mode == "aligned":
        sol, bd = hungarian_loss_decomposed(preds, gts, loss_cfg)
        matcher_cost = build_cost_matrix(preds.detach(), gts, loss_cfg).values
    else:
        matcher_cost = baseline_cost_matrix(preds, gts, loss_cfg)
        sol = solve_rectangular(matcher_cost)
        bd = hungarian_loss_direct(preds, gts, sol, loss_cfg)
    return sol, bd, matcher_cost


def train(cfg: TrainConfig, initial_params: ModelParams | None = None) -> tuple[ModelParams, list[MetricsRow]]:
    """Run the optimisation loop; deterministic given the config seed.

    Each step draws a fresh batch from the data stream, sums the per-scene
    losses, backpropagates once and applies the optimiser.  Every
    ``eval_every`` steps a small held-out evaluation is logged at INFO level;
    the returned rows carry per-step training-batch metrics.
    """
    data_rng = substream(cfg.seed, "data")
    init_rng = substream(cfg.seed, "init")
    params = initial_params or init_params(cfg.scene, cfg.hidden_width, init_rng)
    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(cfg.learning_rate)

    rows: list[MetricsRow] = []
    for step in range(1, cfg.steps + 1):
        scenes = [generate_scene(cfg.scene, data_rng) for _ in range(cfg.batch_size)]
        if not all(np.all(np.isfinite(a)) for a in params.as_arrays().values()):
            raise NonFiniteLossError(step, [format_scene_record(s.truth) for s in scenes])
        tape = Tape()
        attached = attach_params(params, tape)

        batch_total = None
        sums = {"assign": 0.0, "background": 0.0, "class": 0.0, "box": 0.0}
        ious: list[float] = []
        correct: list[bool] = []
        degenerate = 0
        for scene in scenes:
            preds = model_forward(attached, scene.features)
            sol, bd, matcher_cost = _scene_loss(preds, scene.truth, cfg.loss, cfg.loss_mode)
            batch_total = bd.total if batch_total is None else batch_total + bd.total
            sums["assign"] += float(bd.assign_part)
            sums["background"] += float(bd.background_part)
            sums["class"] += float(bd.class_part)
            sums["box"] += float(bd.box_part)
            i, c = _matched_quality(preds, scene.truth, sol.mapping)
            ious.extend(i)
            correct.extend(c)
            if is_degenerate(matcher_cost).degenerate:
                degenerate += 1

        loss_value = float(batch_total)
        if not np.isfinite(loss_value):
            raise NonFiniteLossError(step, [format_scene_record(s.truth) for s in scenes])

        grads = param_gradients(attached, backward(batch_total))
        grads = _clip_global_norm(grads, cfg.clip_norm)
        params = params.replace(opt.step(params.as_arrays(), grads))

        rows.append(
            MetricsRow(
                step=step,
                loss_total=loss_value,
                loss_assign=sums["assign"],
                loss_background=sums["background"],
                loss_class=sums["class"],
                loss_box=sums["box"],
                mean_matched_iou=float(np.mean(ious)),
                class_accuracy=float(np.mean(correct)),
                degeneracy_rate=degenerate / len(scenes),
            )
        )
        if step % cfg.eval_every == 0:
            iou, acc = evaluate(params, cfg.scene, 200, cfg.seed, cfg.loss)
            logger.info("step %d held-out iou=%.4f acc=%.4f", step, iou, acc)
    return params, rows


def evaluate(
    params: ModelParams,
    cfg: SceneConfig,
    num_scenes: int,
    seed: int,
    loss_cfg: LossConfig | None = None,
) -> tuple[float, float]:
    """Held-out quality: mean matched IoU and matched-class accuracy.

    Matching always uses the aligned cost matrix regardless of how the model
    was trained, so both training modes are scored identically.
    """
    if num_scenes < 1:
        raise ValueError("num_scenes must be at least 1")
    loss_cfg = loss_cfg or LossConfig()
    rng = substream(seed, "eval")
    ious: list[float] = []
    correct: list[bool] = []
    for _ in range(num_scenes):
        scene = generate_scene(cfg, rng)
        preds = model_forward(params, scene.features)
        sol = solve_rectangular(build_cost_matrix(preds, scene.truth, loss_cfg).values)
        i, c = _matched_quality(preds, scene.truth, sol.mapping)
        ious.extend(i)
        correct.extend(c)
    return float(np.mean(ious)), float(np.mean(correct))


def write_metrics_csv(rows: list[MetricsRow], fileobj) -> None:
    writer = csv.writer(fileobj)
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([getattr(row, name) for name in METRIC_COLUMNS])


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    write_metrics_csv(rows, buf)
    return buf.getvalue()
