"""Synthetic set-prediction task at desk scale.

A scene is up to ``max_objects`` classed boxes; its feature vector spells the
answer out directly, teacher style, as one block per object written in
canonical order (ascending center-x): the class one-hot followed by the four
box coordinates in logit space.  Unused blocks stay zero.  Because the
features are an injective encoding of the truth, any failure to fit the task
indicts the loss and gradient machinery, not representation learning.

The model is a small tanh perceptron trunk with one independent linear head
per prediction slot, emitting K+1 class logits and four sigmoid-squashed box
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .setloss import GroundTruthSet, PredictionSet

__all__ = [
    "SceneConfig",
    "Scene",
    "ModelParams",
    "ParamTensors",
    "generate_scene",
    "generate_scenes",
    "decode_features",
    "format_scene_record",
    "parse_scene_record",
    "init_params",
    "oracle_params",
    "attach_params",
    "model_forward",
    "param_gradients",
]


@dataclass(frozen=True)
class SceneConfig:
    max_objects: int = 4
    num_slots: int = 10
    num_classes: int = 4
    feature_dim: int = 64
    size_range: tuple[float, float] = (0.25, 0.6)
    seed: int = 0

    def __post_init__(self):
        if not (self.num_slots >= self.max_objects >= 1):
            raise ValueError("need num_slots >= max_objects >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        lo, hi = self.size_range
        if not (0 < lo <= hi < 1):
            raise ValueError("size_range must satisfy 0 < lo <= hi < 1")
        if self.feature_dim < self.max_objects * self.block_size:
            raise ValueError(
                f"feature_dim must hold {self.max_objects} blocks of {self.block_size}"
            )

    @property
    def block_size(self) -> int:
        return self.num_classes + 4


@dataclass(frozen=True, eq=False)
class Scene:
    features: np.ndarray  # (feature_dim,)
    truth: GroundTruthSet


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Draw one scene; deterministic given the generator state.

    Objects are sorted by center-x before encoding, so the block order is a
    canonical function of the truth set.  Box coordinates stay strictly
    inside (0, 1), keeping their logits finite.
    """
    m = int(rng.integers(1, cfg.max_objects + 1))
    classes = rng.integers(0, cfg.num_classes, size=m)
    lo, hi = cfg.size_range
    sizes = rng.uniform(lo, hi, size=(m, 2))
    centers = rng.uniform(sizes / 2, 1 - sizes / 2)
    boxes = np.concatenate([centers, sizes], axis=1)
    order = np.argsort(boxes[:, 0], kind="stable")
    classes, boxes = classes[order], boxes[order]

    bs = cfg.block_size
    features = np.zeros(cfg.feature_dim)
    for i in range(m):
        block = features[i * bs : (i + 1) * bs]
        block[classes[i]] = 1.0
        block[cfg.num_classes :] = _logit(boxes[i])
    return Scene(features, GroundTruthSet(classes, boxes))


def generate_scenes(cfg: SceneConfig, count: int, rng: np.random.Generator) -> list[Scene]:
    return [generate_scene(cfg, rng) for _ in range(count)]


def decode_features(cfg: SceneConfig, features: np.ndarray) -> GroundTruthSet:
    """Invert the feature encoding; round-trips generate_scene's output."""
    bs = cfg.block_size
    classes: list[int] = []
    boxes: list[np.ndarray] = []
    for i in range(cfg.max_objects):
        block = features[i * bs : (i + 1) * bs]
        onehot = block[: cfg.num_classes]
        if not np.any(onehot):
            break
        classes.append(int(np.argmax(onehot)))
        boxes.append(_sigmoid(block[cfg.num_classes :]))
    return GroundTruthSet(np.array(classes, dtype=np.int64), np.array(boxes).reshape(len(classes), 4))


def format_scene_record(truth: GroundTruthSet) -> str:
    """One-line dump: ``m; c x y w h; ...`` with four-decimal boxes."""
    parts = [str(truth.m)]
    for c, box in zip(truth.classes, truth.boxes):
        parts.append(f"{c} " + " ".join(f"{v:.4f}" for v in box))
    return "; ".join(parts)


def parse_scene_record(line: str) -> GroundTruthSet:
    chunks = [c.strip() for c in line.split(";")]
    m = int(chunks[0])
    if len(chunks) != m + 1:
        raise ValueError(f"record announces {m} objects but has {len(chunks) - 1}")
    classes = []
    boxes = []
    for chunk in chunks[1:]:
        fields = chunk.split()
        classes.append(int(fields[0]))
        boxes.append([float(v) for v in fields[1:5]])
    return GroundTruthSet(np.array(classes, dtype=np.int64), np.array(boxes).reshape(m, 4))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ModelParams:
    """Two tanh trunk layers plus one independent linear head per slot."""

    w1: np.ndarray  # (hidden, feature_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray  # (hidden,)
    head_w: np.ndarray  # (num_slots, num_classes + 5, hidden)
    head_b: np.ndarray  # (num_slots, num_classes + 5)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }

    def replace(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(**arrays)

    def save(self, path) -> None:
        np.savez(path, **self.as_arrays())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as data:
            return cls(**{k: data[k] for k in data.files})


@dataclass(eq=False)
class ParamTensors:
    """Model parameters attached to one tape (or detached when tape is None)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    head_w: list[Tensor]
    head_b: list[Tensor]


def init_params(cfg: SceneConfig, hidden: int = 128, rng: np.random.Generator | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic given the generator."""
    rng = rng or np.random.default_rng(cfg.seed)
    k5 = cfg.num_classes + 5

    def glorot(fan_out, fan_in, *lead):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(*lead, fan_out, fan_in))

    return ModelParams(
        w1=glorot(hidden, cfg.feature_dim),
        b1=np.zeros(hidden),
        w2=glorot(hidden, hidden),
        b2=np.zeros(hidden),
        head_w=glorot(k5, hidden, cfg.num_slots),
        head_b=np.zeros((cfg.num_slots, k5)),
    )


def oracle_params(
    cfg: SceneConfig, hidden: int = 128, sharpness: float = 20.0, scale: float = 1e-3
) -> ModelParams:
    """Hand-wired weights: head i copies feature block i.

    The trunk passes features through at a small scale so both tanh layers
    stay in their linear range; each head rescales its block back, turning
    the stored one-hot into confident class logits and the stored box logits
    into the box.  Slots beyond max_objects see zero blocks and stay
    uninformative, which is fine: the matcher never prefers them.
    """
    if hidden < cfg.feature_dim:
        raise ValueError("oracle wiring needs hidden >= feature_dim")
    k = cfg.num_classes
    k5 = k + 5
    bs = cfg.block_size
    d = cfg.feature_dim

    w1 = np.zeros((hidden, d))
    w1[:d, :d] = np.eye(d) * scale
    w2 = np.zeros((hidden, hidden))
    w2[:d, :d] = np.eye(d)
    head_w = np.zeros((cfg.num_slots, k5, hidden))
    for i in range(min(cfg.num_slots, cfg.max_objects)):
        off = i * bs
        for c in range(k):
            head_w[i, c, off + c] = sharpness / scale
        for v in range(4):
            head_w[i, k + 1 + v, off + k + v] = 1.0 / scale
    return ModelParams(
        w1=w1,
        b1=np.zeros(hidden),
        w2=w2,
        b2=np.zeros(hidden),
        head_w=head_w,
        head_b=np.zeros((cfg.num_slots, k5)),
    )


def attach_params(params: ModelParams, tape: Tape | None) -> ParamTensors:
    """Leaf tensors for every parameter array; shared by all scenes on the tape."""

    def wrap(a: np.ndarray) -> Tensor:
        return tape.leaf(a) if tape is not None else ad.constant(a)

    return ParamTensors(
        w1=wrap(params.w1),
        b1=wrap(params.b1),
        w2=wrap(params.w2),
        b2=wrap(params.b2),
        head_w=[wrap(params.head_w[i]) for i in range(params.head_w.shape[0])],
        head_b=[wrap(params.head_b[i]) for i in range(params.head_b.shape[0])],
    )


def param_gradients(attached: ParamTensors, grads) -> dict[str, np.ndarray]:
    """Gradient arrays in the same layout as ``ModelParams.as_arrays``."""
    return {
        "w1": grads.array(attached.w1),
        "b1": grads.array(attached.b1),
        "w2": grads.array(attached.w2),
        "b2": grads.array(attached.b2),
        "head_w": np.stack([grads.array(t) for t in attached.head_w]),
        "head_b": np.stack([grads.array(t) for t in attached.head_b]),
    }


def model_forward(params: ModelParams | ParamTensors, features: np.ndarray, tape: Tape | None = None) -> PredictionSet:
    """Run the query-head model on one feature vector.

    Accepts raw ``ModelParams`` (attached to ``tape`` on the fly, detached if
    no tape is given) or an already-attached ``ParamTensors``, which lets a
    batch share one set of leaves.
    """
    p = attach_params(params, tape) if isinstance(params, ModelParams) else params
    num_classes_plus = p.head_w[0].values.shape[0] - 4  # K + 1

    x = ad.constant(np.asarray(features, dtype=np.float64))
    h1 = ad.tanh(ad.matvec(p.w1, x) + p.b1)
    h2 = ad.tanh(ad.matvec(p.w2, h1) + p.b2)

    logit_rows = []
    box_rows = []
    cls_idx = np.arange(num_classes_plus)
    box_idx = num_classes_plus + np.arange(4)
    for hw, hb in zip(p.head_w, p.head_b):
        out = ad.matvec(hw, h2) + hb
        logit_rows.append(ad.gather(out, cls_idx))
        box_rows.append(ad.gather(out, box_idx))
    logprobs = ad.log_softmax(ad.stack(logit_rows))
    boxes = ad.sigmoid(ad.stack(box_rows))
    return PredictionSet(logprobs, boxes)
