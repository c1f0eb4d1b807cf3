"""Source contribution scoring and consensus-weighted fusion.

Consensus quality of a subset of sources is the sum, over target images and
fused boxes, of support_count * fused confidence. Each source's contribution
is its leave-one-out marginal on that quantity; contributions and dataset
sizes then produce the normalized weights driving the final fusion pass and
the pseudo-label dataset.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

from .errors import (
    AllZeroContributionError,
    DegenerateEnsembleError,
    EmptySubsetError,
    MissingImageError,
)
from .fusion import (
    ConfidenceGates,
    FusedBox,
    FusionParams,
    LabelSpaceFilter,
    knowledge_vote,
)
from .geometry import DetectionSet

# Non-positive contributions are clamped to this before normalization, so
# every source keeps a representable (if negligible) weight.
CF_EPSILON = 1e-9

# Exact subset enumeration is exponential; cap it where it stays interactive.
MAX_SHAPLEY_SOURCES = 12


@dataclass(frozen=True)
class SourceDomain:
    """One source model: its id, name, training-set size, and detections."""

    source_id: int
    name: str
    dataset_size: int
    detections: dict[str, DetectionSet]

    def for_image(self, image_id: str) -> DetectionSet:
        return self.detections.get(image_id, DetectionSet(image_id, ()))


@dataclass(frozen=True)
class SourceEnsemble:
    """All source domains plus the ordered target image ids."""

    sources: tuple[SourceDomain, ...]
    target_image_ids: tuple[str, ...]

    def __post_init__(self):
        ids = [s.source_id for s in self.sources]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("source ids must be contiguous from 1")
        if not self.target_image_ids:
            raise ValueError("target image set is empty")


@dataclass
class ContributionReport:
    """Raw and clamped contributions plus the normalized weights per source."""

    q_full: float = 0.0
    q_leave_one_out: dict[int, float] = field(default_factory=dict)
    cf: dict[int, float] = field(default_factory=dict)
    cf_clamped: dict[int, float] = field(default_factory=dict)
    alpha: dict[int, float] = field(default_factory=dict)
    alpha_extended: float = 0.0
    shapley: dict[int, float] | None = None


@dataclass(frozen=True)
class PseudoLabelDataset:
    """Fused boxes per target image, with the settings that produced them."""

    entries: dict[str, tuple[FusedBox, ...]]
    provenance: dict


def _uniform(params: FusionParams, n: int) -> FusionParams:
    return replace(
        params, model_weights=tuple(1.0 for _ in range(n)), confidence_rescale="none"
    )


def fuse_image(
    subset: list[SourceDomain] | tuple[SourceDomain, ...],
    image_id: str,
    gates: ConfidenceGates,
    flt: LabelSpaceFilter,
    params: FusionParams,
) -> list[FusedBox]:
    """Knowledge-vote fusion of one target image over the given sources."""
    per_model = [s.for_image(image_id) for s in subset]
    return knowledge_vote(per_model, gates, flt, params)


def consensus_quality(
    subset,
    target_image_ids,
    gates: ConfidenceGates,
    flt: LabelSpaceFilter,
    params: FusionParams,
) -> float:
    """Sum of support_count * fused confidence over all images and fused boxes.

    Measured pre-weighting: the subset is fused with uniform weights and no
    confidence rescaling. Summation order is fixed (image order, then the
    fusion output's confidence-descending order) so results are reproducible
    regardless of how callers parallelize.
    """
    subset = list(subset)
    if not subset:
        raise EmptySubsetError("consensus quality of an empty subset")
    uparams = _uniform(params, len(subset))
    total = 0.0
    for image_id in target_image_ids:
        for fb in fuse_image(subset, image_id, gates, flt, uparams):
            total += fb.support_count * fb.confidence
    return total


def consensus_focus_scores(
    ensemble: SourceEnsemble,
    gates: ConfidenceGates,
    flt: LabelSpaceFilter,
    params: FusionParams,
) -> ContributionReport:
    """Leave-one-out marginal contribution of every source.

    Runs one full-ensemble fusion pass plus one per source with that source
    withheld.
    """
    sources = list(ensemble.sources)
    if len(sources) < 2:
        raise DegenerateEnsembleError(
            "leave-one-out contribution needs at least 2 sources"
        )
    report = ContributionReport()
    report.q_full = consensus_quality(
        sources, ensemble.target_image_ids, gates, flt, params
    )
    for i, src in enumerate(sources):
        rest = sources[:i] + sources[i + 1 :]
        q_loo = consensus_quality(
            rest, ensemble.target_image_ids, gates, flt, params
        )
        report.q_leave_one_out[src.source_id] = q_loo
        cf = report.q_full - q_loo
        report.cf[src.source_id] = cf
        report.cf_clamped[src.source_id] = max(cf, CF_EPSILON)
    return report


def shapley_scores(
    ensemble: SourceEnsemble,
    gates: ConfidenceGates,
    flt: LabelSpaceFilter,
    params: FusionParams,
) -> dict[int, float]:
    """Exact Shapley value of consensus quality per source (small ensembles only)."""
    sources = list(ensemble.sources)
    n = len(sources)
    if n > MAX_SHAPLEY_SOURCES:
        raise DegenerateEnsembleError(
            f"exact enumeration limited to {MAX_SHAPLEY_SOURCES} sources, got {n}"
        )
    quality: dict[frozenset[int], float] = {frozenset(): 0.0}
    indices = list(range(n))
    for r in range(1, n + 1):
        for combo in itertools.combinations(indices, r):
            subset = [sources[i] for i in combo]
            quality[frozenset(combo)] = consensus_quality(
                subset, ensemble.target_image_ids, gates, flt, params
            )
    fact = math.factorial
    values: dict[int, float] = {}
    for i in indices:
        others = [j for j in indices if j != i]
        phi = 0.0
        for r in range(len(others) + 1):
            coeff = fact(r) * fact(n - r - 1) / fact(n)
            for combo in itertools.combinations(others, r):
                s = frozenset(combo)
                phi += coeff * (quality[s | {i}] - quality[s])
        values[sources[i].source_id] = phi
    return values


def compute_weights(
    report: ContributionReport,
    source_sizes: dict[int, int],
    target_size: int,
) -> ContributionReport:
    """Fill in the normalized weights from clamped contributions and set sizes.

    The extended-dataset weight is the target's share of all image counts;
    the rest is split among sources proportionally to size * contribution.
    """
    if target_size < 1:
        raise ValueError("target size must be >= 1")
    sizes_total = sum(source_sizes[i] for i in report.cf_clamped)
    report.alpha_extended = target_size / (target_size + sizes_total)
    numerators = {
        i: source_sizes[i] * report.cf_clamped[i] for i in report.cf_clamped
    }
    total = sum(numerators.values())
    if total == 0.0:
        raise AllZeroContributionError("all size-weighted contributions are zero")
    remainder = 1.0 - report.alpha_extended
    report.alpha = {i: (remainder * num) / total for i, num in numerators.items()}
    return report


def weighted_fusion(
    ensemble: SourceEnsemble,
    report: ContributionReport,
    gates: ConfidenceGates,
    flt: LabelSpaceFilter,
    params: FusionParams,
) -> dict[str, list[FusedBox]]:
    """Final consensus-weighted knowledge-vote pass over every target image."""
    weights = tuple(report.alpha[s.source_id] for s in ensemble.sources)
    wparams = replace(params, model_weights=weights)
    return {
        image_id: fuse_image(ensemble.sources, image_id, gates, flt, wparams)
        for image_id in ensemble.target_image_ids
    }


def emit_pseudo_labels(
    fused: dict[str, list[FusedBox]],
    target_image_ids,
    provenance: dict,
) -> PseudoLabelDataset:
    """Package fused boxes for every target image into a pseudo-label dataset."""
    entries: dict[str, tuple[FusedBox, ...]] = {}
    for image_id in target_image_ids:
        if image_id not in fused:
            raise MissingImageError(f"no fused entry for target image {image_id!r}")
        entries[image_id] = tuple(fused[image_id])
    return PseudoLabelDataset(entries=entries, provenance=dict(provenance))
