"""Remodeled predictor heads: prototype reweighting of RoI features,
per-branch match/background classification, box regression, the
background-threshold decision rule, and the combined episode loss."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .prototypes import PrototypeSet
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    broadcast_row,
    elementwise_mul,
    init_bias,
    init_weight,
    matmul,
    mean_scalars,
    row,
    smooth_l1,
    softmax_cross_entropy,
)

__all__ = [
    "BACKGROUND",
    "MATCH",
    "Detection",
    "EpisodeLoss",
    "PredictorHead",
    "RoIFeature",
    "apply_deltas",
    "decide",
    "detection_loss",
    "encode_deltas",
    "nms",
    "predict",
    "reweight",
    "write_detections_csv",
]

# Per-branch classifier logit indices.
BACKGROUND = 0
MATCH = 1

Box = tuple[float, float, float, float]


def _check_box(box: Sequence[float]) -> Box:
    xmin, ymin, xmax, ymax = (float(v) for v in box)
    if not (xmin < xmax and ymin < ymax):
        raise ValueError(f"box not well-ordered: {(xmin, ymin, xmax, ymax)}")
    return (xmin, ymin, xmax, ymax)


@dataclass
class RoIFeature:
    """One region-of-interest: feature vector, proposal box, optional truth.

    A foreground RoI carries the index of its ground-truth category and the
    regression deltas from its proposal box to the true box; a background
    RoI carries neither.
    """

    vector: np.ndarray
    proposal_box: Box
    gt_category: "int | None" = None
    gt_deltas: "np.ndarray | None" = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.proposal_box = _check_box(self.proposal_box)
        if self.gt_deltas is not None:
            self.gt_deltas = np.asarray(self.gt_deltas, dtype=np.float64)

    @property
    def is_foreground(self) -> bool:
        return self.gt_category is not None


@dataclass(frozen=True)
class Detection:
    """Final detector output for one RoI."""

    box: Box
    category: int
    confidence: float

    def __post_init__(self):
        _check_box(self.box)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


class PredictorHead:
    """Shared per-branch heads: 2-way match/background classifier and a
    4-delta box regressor, plus the objectness threshold for decisions."""

    def __init__(self, w_cls: Tensor, b_cls: Tensor, w_box: Tensor, b_box: Tensor,
                 objectness_threshold: float = 0.5):
        if not 0.0 < objectness_threshold < 1.0:
            raise ValueError(f"objectness threshold {objectness_threshold} outside (0, 1)")
        self.w_cls = w_cls
        self.b_cls = b_cls
        self.w_box = w_box
        self.b_box = b_box
        self.objectness_threshold = objectness_threshold

    @classmethod
    def create(cls, f_dim: int, objectness_threshold: float,
               rng: np.random.Generator) -> "PredictorHead":
        return cls(init_weight(f_dim, 2, rng), init_bias(2),
                   init_weight(f_dim, 4, rng), init_bias(4),
                   objectness_threshold)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "head_cls.weights": self.w_cls,
            "head_cls.bias": self.b_cls,
            "head_box.weights": self.w_box,
            "head_box.bias": self.b_box,
        }


def reweight(roi: RoIFeature, protoset: PrototypeSet) -> Tensor:
    """All per-category reweighted copies of one RoI feature.

    Row i of the result is the elementwise product of the RoI vector with
    refined prototype row i.
    """
    protos = protoset.refined
    if protos is None:
        raise ValueError("refined prototypes are unbound; run transfer first")
    if roi.vector.shape != (protos.shape[1],):
        raise ShapeError(
            f"RoI feature length {roi.vector.shape} != prototype length ({protos.shape[1]},)")
    tiled = broadcast_row(Tensor(roi.vector), protos.shape[0])
    return elementwise_mul(tiled, protos)


def _branch_outputs(roi: RoIFeature, protoset: PrototypeSet,
                    head: PredictorHead) -> tuple[Tensor, Tensor]:
    """Classifier logits (C x 2) and regression deltas (C x 4) for every branch."""
    reweighted = reweight(roi, protoset)
    logits = add_bias(matmul(reweighted, head.w_cls), head.b_cls)
    deltas = add_bias(matmul(reweighted, head.w_box), head.b_box)
    return logits, deltas


def _match_scores(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps[:, MATCH] / exps.sum(axis=1)


def predict(roi: RoIFeature, protoset: PrototypeSet,
            head: PredictorHead) -> tuple[np.ndarray, np.ndarray]:
    """Per-category match scores and box deltas for one RoI."""
    logits, deltas = _branch_outputs(roi, protoset, head)
    return _match_scores(logits.data), deltas.data.copy()


def decide(scores: np.ndarray, deltas: np.ndarray, roi: RoIFeature,
           head: PredictorHead) -> "Detection | None":
    """Threshold rule: background if the best match score is too low.

    Ties in the scores go to the lowest category index.
    """
    best = int(np.argmax(scores))
    if scores[best] < head.objectness_threshold:
        return None
    box = apply_deltas(roi.proposal_box, deltas[best])
    return Detection(box, best, float(scores[best]))


def apply_deltas(box: Sequence[float], deltas: Sequence[float]) -> Box:
    """Shift/scale a box by (dx, dy, dw, dh) in the center-size parameterization."""
    xmin, ymin, xmax, ymax = _check_box(box)
    dx, dy, dw, dh = (float(v) for v in deltas)
    w, h = xmax - xmin, ymax - ymin
    cx, cy = xmin + 0.5 * w, ymin + 0.5 * h
    cx, cy = cx + dx * w, cy + dy * h
    w, h = w * math.exp(dw), h * math.exp(dh)
    return (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas(src: Sequence[float], dst: Sequence[float]) -> np.ndarray:
    """The (dx, dy, dw, dh) taking box ``src`` onto box ``dst``."""
    sx0, sy0, sx1, sy1 = _check_box(src)
    dx0, dy0, dx1, dy1 = _check_box(dst)
    sw, sh = sx1 - sx0, sy1 - sy0
    dw, dh = dx1 - dx0, dy1 - dy0
    return np.array([
        ((dx0 + dx1) - (sx0 + sx1)) / (2.0 * sw),
        ((dy0 + dy1) - (sy0 + sy1)) / (2.0 * sh),
        math.log(dw / sw),
        math.log(dh / sh),
    ])


@dataclass
class EpisodeLoss:
    """The combined loss and its three components, all scalar tensors."""

    total: Tensor
    l_cls: Tensor
    l_box: Tensor
    l_meta: Tensor

    def as_floats(self) -> tuple[float, float, float, float]:
        return (self.l_cls.item(), self.l_box.item(), self.l_meta.item(), self.total.item())


def detection_loss(rois: Sequence[RoIFeature], protoset: PrototypeSet,
                   head: PredictorHead, meta_loss_value: Tensor) -> EpisodeLoss:
    """Classification + box regression + meta loss over one RoI batch.

    A foreground RoI is classified through its ground-truth category's
    reweighted branch (target: match) and regressed there too; a background
    RoI penalizes its max-scoring branch (target: background). The box term
    averages over foreground RoIs only and is exactly 0 without any.
    """
    if not rois:
        raise ValueError("detection loss over an empty RoI batch")
    cls_terms = []
    box_terms = []
    for roi in rois:
        logits, deltas = _branch_outputs(roi, protoset, head)
        if roi.is_foreground:
            if roi.gt_deltas is None:
                raise ValueError("foreground RoI without target deltas")
            branch = roi.gt_category
            cls_terms.append(softmax_cross_entropy(row(logits, branch), MATCH))
            box_terms.append(smooth_l1(row(deltas, branch), Tensor(roi.gt_deltas)))
        else:
            branch = int(np.argmax(_match_scores(logits.data)))
            cls_terms.append(softmax_cross_entropy(row(logits, branch), BACKGROUND))
    l_cls = mean_scalars(cls_terms)
    l_box = mean_scalars(box_terms) if box_terms else Tensor(0.0)
    total = add(add(l_cls, l_box), meta_loss_value)
    return EpisodeLoss(total, l_cls, l_box, meta_loss_value)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-category suppression of overlapping detections.

    Within each category, detections are visited in descending confidence
    (ties keep input order) and any later detection overlapping a kept one
    with IoU above the threshold is dropped. Output keeps input order.
    """
    from .evaluation import iou

    keep_flags = [False] * len(detections)
    by_category: dict[int, list[int]] = {}
    for idx, det in enumerate(detections):
        by_category.setdefault(det.category, []).append(idx)
    for indices in by_category.values():
        ordered = sorted(indices, key=lambda i: -detections[i].confidence)
        kept: list[int] = []
        for i in ordered:
            if all(iou(detections[i].box, detections[j].box) <= iou_threshold for j in kept):
                kept.append(i)
                keep_flags[i] = True
    return [det for idx, det in enumerate(detections) if keep_flags[idx]]


def write_detections_csv(path: str, rows: Sequence[tuple[str, Detection]]) -> None:
    """Dump detections as image_id, category, confidence, xmin, ymin, xmax, ymax."""
    lines = ["image_id,category,confidence,xmin,ymin,xmax,ymax"]
    for image_id, det in rows:
        xmin, ymin, xmax, ymax = det.box
        lines.append(f"{image_id},{det.category},{det.confidence:.17g},"
                     f"{xmin:.17g},{ymin:.17g},{xmax:.17g},{ymax:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
