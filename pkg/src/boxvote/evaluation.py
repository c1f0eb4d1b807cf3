"""Detection scoring: precision/recall, average precision, F1 curves.

Matching is the standard greedy scheme: detections in confidence order, each
taking the best still-unmatched ground-truth box at or above the IoU
threshold. AP is 101-point interpolated; the multi-threshold mAP averages
IoU thresholds 0.50 to 0.95 in steps of 0.05.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyGroundTruthError
from .geometry import iou

AP_RECALL_POINTS = 101
MAP_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
DEFAULT_F1_GRID = tuple(
    0.0001 + (1.0 - 0.0001) * k / 199 for k in range(200)
)


@dataclass(frozen=True)
class GroundTruthBox:
    cls: int
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class GroundTruth:
    """Ground-truth boxes per image id."""

    entries: dict[str, tuple[GroundTruthBox, ...]]

    def classes(self) -> list[int]:
        present = {b.cls for boxes in self.entries.values() for b in boxes}
        return sorted(present)

    def num_gt(self, cls: int) -> int:
        return sum(
            1 for boxes in self.entries.values() for b in boxes if b.cls == cls
        )


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    ap50: float
    ap5095: float


@dataclass
class MetricsReport:
    per_class: dict[int, ClassMetrics]
    aggregate: ClassMetrics
    confidence_threshold: float


@dataclass
class F1Curve:
    """Per-class and mean F1 sampled along an ascending confidence grid."""

    points: list[tuple[float, dict[int, float], float]]


def match_detections(dets, gt_boxes, iou_thresh: float):
    """Greedy confidence-ordered matching for a single image / class slice.

    Returns (detection, matched) pairs in confidence-descending order; each
    ground-truth box matches at most once.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].confidence, k))
    taken = [False] * len(gt_boxes)
    out = []
    for k in order:
        d = dets[k]
        best_iou = 0.0
        best_g = -1
        for g, gt in enumerate(gt_boxes):
            if taken[g]:
                continue
            ov = iou(d, gt)
            if ov > best_iou:
                best_iou = ov
                best_g = g
        if best_g >= 0 and best_iou >= iou_thresh:
            taken[best_g] = True
            out.append((d, True))
        else:
            out.append((d, False))
    return out


def average_precision(matched_flags, num_gt: int) -> float:
    """101-point interpolated AP from confidence-sorted match flags."""
    if num_gt == 0:
        return 0.0
    tp = 0
    fp = 0
    precisions = []
    recalls = []
    for m in matched_flags:
        if m:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / num_gt)
    # precision envelope: max precision at or beyond each point
    envelope = list(precisions)
    for k in range(len(envelope) - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    total = 0.0
    j = 0
    for step in range(AP_RECALL_POINTS):
        r = step / (AP_RECALL_POINTS - 1)
        while j < len(recalls) and recalls[j] < r:
            j += 1
        if j < len(envelope):
            total += envelope[j]
    return total / AP_RECALL_POINTS


def _class_match_lists(fused, gt: GroundTruth, iou_thresh: float):
    """Per class: (conf, matched) across all images, globally confidence-sorted.

    Ties break by (image id, ingestion order) so metrics are independent of
    image iteration order.
    """
    per_class: dict[int, list[tuple[float, str, int, bool]]] = {
        c: [] for c in gt.classes()
    }
    image_ids = sorted(set(gt.entries) | set(fused))
    for image_id in image_ids:
        dets = list(fused.get(image_id, ()))
        gt_boxes = gt.entries.get(image_id, ())
        for cls in per_class:
            cls_dets = [d for d in dets if d.cls == cls]
            cls_gt = [g for g in gt_boxes if g.cls == cls]
            matched = match_detections(cls_dets, cls_gt, iou_thresh)
            for rank, (d, m) in enumerate(matched):
                per_class[cls].append((d.confidence, image_id, rank, m))
    for cls in per_class:
        per_class[cls].sort(key=lambda t: (-t[0], t[1], t[2]))
    return per_class


def _filter_fused(fused, confidence_threshold: float):
    return {
        image_id: [d for d in dets if d.confidence >= confidence_threshold]
        for image_id, dets in fused.items()
    }


def evaluate(fused, gt: GroundTruth, confidence_threshold: float) -> MetricsReport:
    """Score fused detections against ground truth at one operating point.

    Aggregates are unweighted means over classes present in the ground truth.
    """
    if not any(gt.entries.values()):
        raise EmptyGroundTruthError("ground truth contains no boxes")
    kept = _filter_fused(fused, confidence_threshold)
    lists_by_thresh = {t: _class_match_lists(kept, gt, t) for t in MAP_IOU_THRESHOLDS}
    per_class: dict[int, ClassMetrics] = {}
    for cls in gt.classes():
        num_gt = gt.num_gt(cls)
        flags_50 = [m for _, _, _, m in lists_by_thresh[0.5][cls]]
        tp = sum(flags_50)
        n_det = len(flags_50)
        precision = tp / n_det if n_det else 0.0
        recall = tp / num_gt if num_gt else 0.0
        ap50 = average_precision(flags_50, num_gt)
        ap_sum = ap50
        for t in MAP_IOU_THRESHOLDS[1:]:
            flags = [m for _, _, _, m in lists_by_thresh[t][cls]]
            ap_sum += average_precision(flags, num_gt)
        per_class[cls] = ClassMetrics(
            precision=precision,
            recall=recall,
            ap50=ap50,
            ap5095=ap_sum / len(MAP_IOU_THRESHOLDS),
        )
    present = [c for c in per_class if gt.num_gt(c) > 0]
    if present:
        agg = ClassMetrics(
            precision=sum(per_class[c].precision for c in present) / len(present),
            recall=sum(per_class[c].recall for c in present) / len(present),
            ap50=sum(per_class[c].ap50 for c in present) / len(present),
            ap5095=sum(per_class[c].ap5095 for c in present) / len(present),
        )
    else:
        agg = ClassMetrics(0.0, 0.0, 0.0, 0.0)
    return MetricsReport(
        per_class=per_class, aggregate=agg, confidence_threshold=confidence_threshold
    )


def f1_curve(fused, gt: GroundTruth, grid=DEFAULT_F1_GRID) -> F1Curve:
    """F1 per class and class-mean at every grid confidence.

    Greedy matching is prefix-stable in confidence order, so the matches are
    computed once and each grid point counts the prefix above it.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("confidence grid is empty")
    if any(b >= a for a, b in zip(grid[1:], grid)):
        raise ValueError("confidence grid must be strictly ascending")
    per_class = _class_match_lists(fused, gt, 0.5)
    classes = [c for c in per_class if gt.num_gt(c) > 0]
    points = []
    for c_thresh in grid:
        f1_by_class: dict[int, float] = {}
        for cls in classes:
            rows = [t for t in per_class[cls] if t[0] >= c_thresh]
            tp = sum(1 for t in rows if t[3])
            num_gt = gt.num_gt(cls)
            p = tp / len(rows) if rows else 0.0
            r = tp / num_gt
            f1_by_class[cls] = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        mean = (
            sum(f1_by_class.values()) / len(f1_by_class) if f1_by_class else 0.0
        )
        points.append((c_thresh, f1_by_class, mean))
    return F1Curve(points=points)
