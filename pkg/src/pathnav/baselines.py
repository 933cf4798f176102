"""Reference selection strategies: random tiles with majority aggregation,
and single-turn one-shot coordinate selection.

Both honor the matched-m protocol: when the agent is configured to return m
regions, the baselines emit exactly m as well. Random tiles must be
non-overlapping as full level-0 windows, not merely distinct centers, so
rejection uses the actual (boundary-shifted) window rectangles.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from pathnav.errors import (
    CapacityError,
    ConfigError,
    DegenerateSlideError,
    DuplicateSelectionError,
    MetricUndefinedError,
)
from pathnav.policy import AgentView
from pathnav.slide import NormPoint, PyramidSlide, RegionSpec, TissueMask, region_window


@dataclass
class BaselineConfig:
    """Knobs for the two comparison approaches."""

    random_K: int = 21
    single_turn_K: int = 20
    matched_m: int | None = None
    class_order: tuple = ()
    seed: int = 0
    roi_size: int = 1024

    def __post_init__(self):
        if self.random_K < 1:
            raise ConfigError("random_K must be at least 1")
        if self.single_turn_K < 1:
            raise ConfigError("single_turn_K must be at least 1")
        if self.matched_m is not None and self.matched_m < 1:
            raise ConfigError("matched_m must be at least 1 when set")


def random_rois(
    mask: TissueMask,
    slide: PyramidSlide,
    K: int,
    rng: np.random.Generator,
    roi_size: int = 1024,
) -> list[RegionSpec]:
    """K uniform foreground centers whose level-0 windows are pairwise disjoint.

    Windows are compared after boundary shifting, so disjointness holds for
    the patches actually extracted. Deterministic per generator state; raises
    CapacityError when the tissue cannot pack K windows.
    """
    if not mask.grid.any():
        raise DegenerateSlideError("tissue mask has no foreground")
    regions: list[RegionSpec] = []
    windows: list[tuple[int, int]] = []
    max_attempts = 10_000 * K
    attempts = 0
    batch = 128
    while len(regions) < K and attempts < max_attempts:
        n = min(batch, max_attempts - attempts)
        xy = rng.random((n, 2))
        attempts += n
        keep = mask.contains_xy(xy[:, 0], xy[:, 1])
        for x, y in xy[keep]:
            r = RegionSpec(NormPoint(float(x), float(y)), 0, roi_size)
            wx, wy = region_window(slide, r)
            if any(
                abs(wx - ox) < roi_size and abs(wy - oy) < roi_size
                for ox, oy in windows
            ):
                continue
            regions.append(r)
            windows.append((wx, wy))
            if len(regions) == K:
                break
    if len(regions) < K:
        raise CapacityError(
            f"placed only {len(regions)} of {K} disjoint {roi_size}px windows "
            f"after {max_attempts} attempts"
        )
    return regions


def majority_vote(preds: list, class_order: tuple) -> object:
    """Modal prediction; ties resolve to the earliest label in class_order."""
    if not preds:
        raise MetricUndefinedError("majority vote over an empty prediction list")
    unknown = [p for p in preds if p not in class_order]
    if unknown:
        raise MetricUndefinedError(f"labels outside the class order: {unknown[:3]}")
    counts = Counter(preds)
    best = max(counts.values())
    for label in class_order:
        if counts.get(label, 0) == best:
            return label
    raise MetricUndefinedError("unreachable: no label reached the max count")


def mean_score_aggregate(scores: list[float]) -> float:
    """Arithmetic mean of per-report judge scores."""
    if not scores:
        raise MetricUndefinedError("mean over an empty score list")
    return float(np.mean(np.asarray(scores, dtype=float)))


def checklist_aggregate(case_accs: list[float]) -> float:
    """Mean of per-report case accuracies (second stage of the two-stage rule)."""
    if not case_accs:
        raise MetricUndefinedError("mean over an empty accuracy list")
    arr = np.asarray(case_accs, dtype=float)
    if ((arr < 0) | (arr > 1)).any():
        raise MetricUndefinedError("case accuracies must lie in [0, 1]")
    return float(arr.mean())


@dataclass
class SingleTurnResult:
    regions: list[RegionSpec]
    views_seen: list[AgentView] = field(default_factory=list)


def single_turn_select(
    view: AgentView,
    policy,
    m: int = 1,
    snap_delta: float = 0.01,
    roi_size: int = 1024,
) -> list[RegionSpec]:
    """Repeat the one-shot pick m times without replacement, without memory.

    Every call presents the same candidate list and no prior patches, so no
    iterative context accumulates. When a call re-picks an already chosen
    candidate (unavoidable for deterministic policies), that call is retried
    once with the chosen candidates filtered out of the list; a duplicate
    after that filtering raises DuplicateSelectionError. m beyond the
    candidate budget is a precondition error.
    """
    if view.candidates is None:
        raise ConfigError("single-turn selection needs a candidate list")
    if m > len(view.candidates):
        raise ConfigError(
            f"m={m} exceeds the single-turn candidate budget {len(view.candidates)}"
        )
    chosen: list[NormPoint] = []
    regions: list[RegionSpec] = []

    def is_duplicate(p: NormPoint) -> bool:
        return any(p.distance(c) < 1e-12 for c in chosen)

    for _ in range(m):
        decision = policy(view, view.query)
        if decision.terminate:
            raise DuplicateSelectionError(
                "single-turn policy terminated instead of selecting a candidate"
            )
        if is_duplicate(decision.point):
            remaining = [c for c in view.candidates if not is_duplicate(c)]
            filtered = AgentView(
                thumbnail=view.thumbnail,
                prior_patches=[],
                candidates=remaining,
                query=view.query,
                round=view.round,
                max_level=view.max_level,
                roi_size=view.roi_size,
                anchor=view.anchor,
            )
            decision = policy(filtered, view.query)
            if decision.terminate or is_duplicate(decision.point):
                raise DuplicateSelectionError(
                    f"candidate selected twice; without-replacement filtering "
                    f"exhausted at {len(chosen)} of {m} picks"
                )
        chosen.append(decision.point)
        regions.append(RegionSpec(decision.point, decision.level, roi_size))
    return regions
