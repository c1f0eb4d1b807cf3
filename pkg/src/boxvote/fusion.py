"""Box-combination algorithms: NMS, soft-NMS, WBF, and the gated knowledge vote.

All four map detections for a single image to a fused result. Boxes of
different classes never interact. Every function is pure; callers may fuse
different images in parallel freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import WeightArityMismatchError
from .geometry import Box, DetectionSet, iou


@dataclass(frozen=True)
class ConfidenceGates:
    """Per-class minimum confidences; classes absent from the map use default_gate."""

    gates: dict[int, float] = field(default_factory=dict)
    default_gate: float = 0.0

    def gate(self, cls: int) -> float:
        return self.gates.get(cls, self.default_gate)


@dataclass(frozen=True)
class LabelSpaceFilter:
    """Restriction of the target label space: keep everything or a listed subset."""

    mode: str = "keep_all"  # keep_all | keep_listed
    classes: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.mode not in ("keep_all", "keep_listed"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if self.mode == "keep_listed" and not self.classes:
            raise ValueError("keep_listed filter requires a non-empty class set")

    def keeps(self, cls: int) -> bool:
        return self.mode == "keep_all" or cls in self.classes


KEEP_ALL = LabelSpaceFilter()
NO_GATES = ConfidenceGates()


@dataclass(frozen=True)
class FusionParams:
    """Parameter bundle shared by all fusion algorithms."""

    iou_threshold: float = 0.55
    soft_nms_sigma: float = 0.5
    score_floor: float = 0.001
    model_weights: tuple[float, ...] | None = None  # None = uniform
    confidence_rescale: str = "none"  # none | support_ratio


@dataclass(frozen=True)
class FusedBox:
    """A merged box: coordinates, fused confidence, and its supporting members."""

    cls: int
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float
    support_count: int
    members: tuple[tuple[int, Box], ...]  # (source index, original box)


def apply_gates(
    dets: DetectionSet, gates: ConfidenceGates, flt: LabelSpaceFilter = KEEP_ALL
) -> DetectionSet:
    """Keep only boxes whose class passes the filter and confidence >= gate."""
    kept = tuple(
        b
        for b in dets.boxes
        if flt.keeps(b.cls) and b.confidence >= gates.gate(b.cls)
    )
    return DetectionSet(dets.image_id, kept)


def _by_confidence(indexed):
    # deterministic order: confidence desc, then source, then ingestion index
    return sorted(indexed, key=lambda t: (-t[0].confidence, t[0].source, t[1]))


def nms(dets: DetectionSet, params: FusionParams) -> DetectionSet:
    """Greedy per-class suppression at params.iou_threshold."""
    kept: list[tuple[Box, int]] = []
    by_class: dict[int, list[tuple[Box, int]]] = {}
    for idx, b in enumerate(dets.boxes):
        by_class.setdefault(b.cls, []).append((b, idx))
    for cls in sorted(by_class):
        candidates = _by_confidence(by_class[cls])
        chosen: list[tuple[Box, int]] = []
        for b, idx in candidates:
            if all(iou(b, k) <= params.iou_threshold for k, _ in chosen):
                chosen.append((b, idx))
        kept.extend(chosen)
    return DetectionSet(dets.image_id, tuple(b for b, _ in _by_confidence(kept)))


def soft_nms(dets: DetectionSet, params: FusionParams) -> DetectionSet:
    """Gaussian soft-NMS: decay overlapping same-class confidences instead of
    discarding, then drop boxes below params.score_floor."""
    out: list[tuple[Box, int]] = []
    by_class: dict[int, list[tuple[Box, int]]] = {}
    for idx, b in enumerate(dets.boxes):
        by_class.setdefault(b.cls, []).append((b, idx))
    for cls in sorted(by_class):
        remaining = list(by_class[cls])
        while remaining:
            remaining.sort(key=lambda t: (-t[0].confidence, t[0].source, t[1]))
            top, top_idx = remaining.pop(0)
            out.append((top, top_idx))
            decayed = []
            for b, idx in remaining:
                ov = iou(top, b)
                if ov > 0.0:
                    factor = math.exp(-(ov * ov) / params.soft_nms_sigma)
                    b = replace(b, confidence=b.confidence * factor)
                if b.confidence >= params.score_floor:
                    decayed.append((b, idx))
            remaining = decayed
    return DetectionSet(dets.image_id, tuple(b for b, _ in _by_confidence(out)))


def _fuse_cluster(members: list[tuple[Box, float, int]]) -> tuple[float, float, float, float, float]:
    """Fused (x1, y1, x2, y2, confidence) of a cluster of (box, weight, order) members.

    Coordinates are the confidence*weight-weighted average; confidence is the
    weight-weighted mean. A singleton cluster passes its box through exactly.
    """
    if len(members) == 1:
        b = members[0][0]
        return b.x1, b.y1, b.x2, b.y2, b.confidence
    cw_sum = 0.0
    w_sum = 0.0
    x1 = y1 = x2 = y2 = 0.0
    conf = 0.0
    for b, w, _ in members:
        cw = b.confidence * w
        cw_sum += cw
        w_sum += w
        x1 += cw * b.x1
        y1 += cw * b.y1
        x2 += cw * b.x2
        y2 += cw * b.y2
        conf += w * b.confidence
    if cw_sum <= 0.0 or w_sum <= 0.0:
        b = members[0][0]
        return b.x1, b.y1, b.x2, b.y2, 0.0
    return x1 / cw_sum, y1 / cw_sum, x2 / cw_sum, y2 / cw_sum, conf / w_sum


class _FusedView:
    """Lightweight corner view so iou() can compare against a running cluster."""

    __slots__ = ("x1", "y1", "x2", "y2")

    def __init__(self, coords):
        self.x1, self.y1, self.x2, self.y2 = coords


def wbf(per_model: list[DetectionSet], params: FusionParams) -> list[FusedBox]:
    """Weighted box fusion across models, counting distinct supporting sources.

    Per class, boxes are processed in descending weighted-confidence order;
    each joins the first cluster whose current fused box overlaps it beyond
    params.iou_threshold, else starts a new cluster.
    """
    n_models = len(per_model)
    weights = params.model_weights
    if weights is None:
        weights = tuple(1.0 for _ in range(n_models))
    if len(weights) != n_models:
        raise WeightArityMismatchError(
            f"{len(weights)} weights for {n_models} models"
        )
    if not any(w > 0.0 for w in weights):
        raise WeightArityMismatchError("at least one model weight must be positive")

    n_active = sum(1 for w in weights if w > 0.0)

    pool: dict[int, list[tuple[Box, float, int]]] = {}
    for dets, w in zip(per_model, weights):
        if w <= 0.0:
            continue  # zero-weight models contribute nothing, including support
        for idx, b in enumerate(dets.boxes):
            pool.setdefault(b.cls, []).append((b, w, idx))

    fused: list[FusedBox] = []
    for cls in sorted(pool):
        candidates = sorted(
            pool[cls],
            key=lambda t: (-(t[0].confidence * t[1]), t[0].source, t[2]),
        )
        clusters: list[list[tuple[Box, float, int]]] = []
        cached: list[tuple[float, float, float, float, float]] = []
        for cand in candidates:
            placed = False
            for ci, coords in enumerate(cached):
                if iou(cand[0], _FusedView(coords[:4])) > params.iou_threshold:
                    clusters[ci].append(cand)
                    cached[ci] = _fuse_cluster(clusters[ci])
                    placed = True
                    break
            if not placed:
                clusters.append([cand])
                cached.append(_fuse_cluster(clusters[-1]))
        for members, coords in zip(clusters, cached):
            x1, y1, x2, y2, conf = coords
            sources = {b.source for b, _, _ in members}
            n_b = len(sources)
            if params.confidence_rescale == "support_ratio":
                conf = conf * (min(n_b, n_active) / n_active)
            fused.append(
                FusedBox(
                    cls=cls,
                    x1=x1,
                    y1=y1,
                    x2=x2,
                    y2=y2,
                    confidence=conf,
                    support_count=n_b,
                    members=tuple((b.source, b) for b, _, _ in members),
                )
            )
    fused.sort(key=lambda f: (-f.confidence, f.cls, f.x1, f.y1, f.x2, f.y2))
    return fused


def knowledge_vote(
    per_model: list[DetectionSet],
    gates: ConfidenceGates,
    flt: LabelSpaceFilter,
    params: FusionParams,
) -> list[FusedBox]:
    """Class-gated, support-counting WBF: gate each model's boxes, then fuse."""
    gated = [apply_gates(d, gates, flt) for d in per_model]
    return wbf(gated, params)
