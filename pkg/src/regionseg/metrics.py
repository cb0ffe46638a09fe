"""Segmentation metrics: per-sample IoU, gIoU, cIoU and COCO-style mask mAP."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .masks import BinaryMask, rle_decode, rle_encode  # noqa: F401  (re-exported codec)

DEFAULT_IOU_THRESHOLDS: Tuple[float, ...] = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
# i/100 exactly; np.linspace drifts by an ulp at some points (e.g. at 0.35)
RECALL_POINTS = np.arange(101) / 100


@dataclass(frozen=True)
class IoURecord:
    sample_id: str
    intersection: int
    union: int
    iou: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ScoredInstance:
    mask: BinaryMask
    score: float
    category: str = ""

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise InvalidInputError(f"instance score must be finite, got {self.score}")


@dataclass
class GtInstance:
    mask: BinaryMask
    category: str = ""


def intersection_union(a: BinaryMask, b: BinaryMask) -> Tuple[int, int]:
    if a.dims != b.dims:
        raise InvalidInputError(f"mask dims differ: {a.dims} vs {b.dims}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter, union


def iou(a: BinaryMask, b: BinaryMask, sample_id: str = "", both_empty: float = 1.0) -> IoURecord:
    """IoU of two equally sized masks.

    When both masks are empty the record carries ``I = U = 0`` and ``iou =
    both_empty`` (1.0 by default, i.e. a correct "not present" answer).
    """
    inter, union = intersection_union(a, b)
    value = inter / union if union else float(both_empty)
    return IoURecord(sample_id=sample_id, intersection=inter, union=union, iou=value)


def giou(records: Sequence[IoURecord]) -> float:
    if not records:
        raise InvalidInputError("gIoU of an empty record list is undefined")
    return float(sum(r.iou for r in records) / len(records))


def ciou(records: Sequence[IoURecord]) -> float:
    """Cumulative intersection over cumulative union; 1.0 if every union is empty."""
    if not records:
        raise InvalidInputError("cIoU of an empty record list is undefined")
    total_i = sum(r.intersection for r in records)
    total_u = sum(r.union for r in records)
    if total_u == 0:
        return 1.0
    return total_i / total_u


def _match_image(
    preds: Sequence[ScoredInstance],
    gts: Sequence[GtInstance],
    thresholds: Sequence[float],
) -> List[Tuple[float, np.ndarray]]:
    """Greedy matching for one image and one category.

    Returns ``(score, matched_per_threshold)`` for each prediction, processed
    in descending score order. A prediction takes the unmatched GT with the
    highest IoU at or above the threshold.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    ious = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            inter, union = intersection_union(p.mask, g.mask)
            ious[i, j] = inter / union if union else 0.0
    taken = np.zeros((len(thresholds), len(gts)), dtype=bool)
    out = []
    for i in order:
        matched = np.zeros(len(thresholds), dtype=bool)
        for t, thr in enumerate(thresholds):
            best, best_j = -1.0, -1
            for j in range(len(gts)):
                if taken[t, j] or ious[i, j] < thr:
                    continue
                if ious[i, j] > best:
                    best, best_j = ious[i, j], j
            if best_j >= 0:
                taken[t, best_j] = True
                matched[t] = True
        out.append((preds[i].score, matched))
    return out


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-ordered true-positive vector."""
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope, non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def map_eval(
    per_image: Sequence[Tuple[Sequence[ScoredInstance], Sequence[GtInstance]]],
    thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
    max_detections: int = 100,
    categories: Optional[Sequence[str]] = None,
) -> Dict[str, object]:
    """COCO-style mask mAP.

    ``per_image`` holds ``(predictions, ground_truths)`` per image. Categories
    without any ground truth are skipped. The result dict carries ``map`` (mean
    over categories and thresholds) plus the per-category/threshold AP table.
    """
    if categories is None:
        categories = sorted({g.category for _, gts in per_image for g in gts})
    n_gt = defaultdict(int)
    for _, gts in per_image:
        for g in gts:
            n_gt[g.category] += 1
    categories = [c for c in categories if n_gt[c] > 0]
    if not categories:
        raise InvalidInputError("mAP is undefined without any ground-truth instance")

    ap = np.zeros((len(categories), len(thresholds)))
    for c_idx, cat in enumerate(categories):
        scored: List[Tuple[float, np.ndarray]] = []
        for preds, gts in per_image:
            p = [x for x in preds if x.category == cat]
            p = sorted(p, key=lambda x: -x.score)[:max_detections]
            g = [x for x in gts if x.category == cat]
            scored.extend(_match_image(p, g, thresholds))
        # stable sort keeps per-image order for tied scores
        order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
        for t in range(len(thresholds)):
            tp = np.array([scored[i][1][t] for i in order], dtype=bool)
            ap[c_idx, t] = _interpolated_ap(tp, n_gt[cat])
    return {
        "map": float(ap.mean()),
        "categories": list(categories),
        "thresholds": [float(t) for t in thresholds],
        "ap": ap.tolist(),
    }
