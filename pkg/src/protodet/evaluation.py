"""VOC-protocol evaluation: IoU, greedy confidence-ranked matching,
all-points average precision, and grouped mean AP reporting."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .graph import CategorySet

__all__ = [
    "EvalReport",
    "PRCurve",
    "average_precision",
    "evaluate_detections",
    "iou",
    "match_detections",
    "mean_ap",
    "summary_line",
    "write_report_csv",
]

Box = tuple[float, float, float, float]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes, continuous-area convention."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def match_detections(detections: Sequence[tuple[str, float, Box]],
                     truths: Mapping[str, Sequence[Box]],
                     iou_threshold: float = 0.5) -> tuple[list[bool], int]:
    """Flag each detection of one category as true or false positive.

    ``detections`` are (image_id, confidence, box) triples; ``truths`` maps
    image ids to that category's ground-truth boxes. Detections are visited
    in descending confidence (ties keep input order); each claims the
    not-yet-claimed truth with highest IoU when that IoU reaches the
    threshold. Returns flags in ranked order plus the total truth count.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    claimed: dict[str, list[bool]] = {img: [False] * len(boxes) for img, boxes in truths.items()}
    n_truth = sum(len(boxes) for boxes in truths.values())
    flags: list[bool] = []
    for i in order:
        image_id, _, box = detections[i]
        boxes = truths.get(image_id, ())
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(boxes):
            overlap = iou(box, gt_box)
            if overlap > best_iou:
                best_iou, best_j = overlap, j
        if best_j >= 0 and best_iou >= iou_threshold and not claimed[image_id][best_j]:
            claimed[image_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_truth


@dataclass(frozen=True)
class PRCurve:
    """Precision/recall at each rank of the sorted detection list."""

    precisions: np.ndarray
    recalls: np.ndarray
    n_truth: int

    @classmethod
    def from_flags(cls, flags: Sequence[bool], n_truth: int) -> "PRCurve":
        tp = np.cumsum([1.0 if f else 0.0 for f in flags])
        ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
        precisions = tp / ranks if len(flags) else np.zeros(0)
        recalls = tp / n_truth if n_truth > 0 else np.zeros(len(flags))
        return cls(precisions, recalls, n_truth)


def average_precision(curve: PRCurve) -> float:
    """Area under the precision envelope over recall (all-points rule).

    Precision at recall r is the max precision achieved at any recall >= r.
    """
    if curve.n_truth <= 0:
        raise ValueError("average precision undefined without ground truths")
    if len(curve.precisions) == 0:
        return 0.0
    recalls = np.concatenate(([0.0], curve.recalls, [curve.recalls[-1]]))
    precisions = np.concatenate(([0.0], curve.precisions, [0.0]))
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    moved = np.nonzero(recalls[1:] != recalls[:-1])[0]
    return float(np.sum((recalls[moved + 1] - recalls[moved]) * precisions[moved + 1]))


@dataclass(frozen=True)
class EvalReport:
    """Per-category AP plus the novel/base/overall means.

    Categories with no ground truths have AP None and are excluded from
    every mean.
    """

    ap: dict[str, "float | None"]
    novel_mean: "float | None"
    base_mean: "float | None"
    overall_mean: "float | None"


def _mean_of(values: list[float]) -> "float | None":
    return float(np.mean(values)) if values else None


def mean_ap(ap: Mapping[str, "float | None"], cats: CategorySet) -> EvalReport:
    """Assemble the grouped report from per-category APs."""
    present = {n: v for n, v in ap.items() if v is not None}
    novel = [present[n] for n in cats.novel_names if n in present]
    base = [present[n] for n in cats.base_names if n in present]
    return EvalReport(dict(ap), _mean_of(novel), _mean_of(base), _mean_of(novel + base))


def evaluate_detections(detections: Sequence[tuple[str, int, float, Box]],
                        truths: Sequence[tuple[str, int, Box]],
                        cats: CategorySet,
                        iou_threshold: float = 0.5) -> EvalReport:
    """Full evaluation: detections and truths as flat records.

    Detections are (image_id, category index, confidence, box); truths are
    (image_id, category index, box).
    """
    report_ap: dict[str, "float | None"] = {}
    for idx, name in enumerate(cats.names):
        cat_truths: dict[str, list[Box]] = {}
        for image_id, cat, box in truths:
            if cat == idx:
                cat_truths.setdefault(image_id, []).append(box)
        cat_dets = [(image_id, conf, box)
                    for image_id, cat, conf, box in detections if cat == idx]
        if not cat_truths:
            report_ap[name] = None
            continue
        flags, n_truth = match_detections(cat_dets, cat_truths, iou_threshold)
        report_ap[name] = average_precision(PRCurve.from_flags(flags, n_truth))
    return mean_ap(report_ap, cats)


def _fmt(value: "float | None") -> str:
    return "absent" if value is None else f"{value:.4f}"


def summary_line(report: EvalReport) -> str:
    return (f"novel={_fmt(report.novel_mean)} base={_fmt(report.base_mean)} "
            f"all={_fmt(report.overall_mean)}")


def write_report_csv(path: str, report: EvalReport, cats: CategorySet) -> None:
    """CSV export: one row per category with its AP and base/novel group."""
    lines = ["category,ap,group"]
    for name in cats.names:
        group = "novel" if cats.is_novel(name) else "base"
        ap = report.ap.get(name)
        lines.append(f"{name},{'' if ap is None else f'{ap:.17g}'},{group}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
