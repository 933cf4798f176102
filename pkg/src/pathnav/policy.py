"""Policy boundary: decisions, the response grammar, and policy implementations.

A policy is any callable `(AgentView, task_text) -> Decision`. The chat
policy prompts a vision chat model and parses its reply; the oracle policy
reads planted ground truth and exists so that the full loop can be exercised
and graded without a model; scripted policies replay canned responses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from pathnav.errors import (
    CoordinateRangeError,
    GrammarError,
    OffCandidateError,
)
from pathnav.prompts import PromptBundle, build_round_prompt, format_reminder
from pathnav.slide import NormPoint, RegionSpec

TERMINATE_TOKEN = "TERMINATE"
NO_JUSTIFICATION = "(no justification)"

_COORD_RE = re.compile(
    r"<<\s*x\s*=\s*([+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)\s*,"
    r"\s*y\s*=\s*([+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)\s*,"
    r"\s*level\s*=\s*([+-]?\d+)\s*"
    r"(?:,\s*confidence\s*=\s*(\d+(?:\.\d+)?)\s*)?>>"
)
_TERMINATE_RE = re.compile(r"\bTERMINATE\b")
_CONFIDENCE_RE = re.compile(r"\bconfidence\s*=\s*(\d+(?:\.\d+)?)")


@dataclass(frozen=True)
class Decision:
    """One policy output: where to look next, or the signal to stop.

    `stop_confidence` is 1.0 for an explicit TERMINATE, a parsed numeric
    confidence when the response carried one, and 0.0 otherwise.
    """

    point: NormPoint | None
    level: int | None
    justification: str
    terminate: bool = False
    stop_confidence: float = 0.0

    def __post_init__(self):
        if not self.terminate:
            if self.point is None or self.level is None:
                raise ValueError("non-terminating decision needs a point and level")
            if not self.justification:
                raise ValueError("non-terminating decision needs a justification")


@dataclass
class PriorRoi:
    """A previously extracted region as presented back to the policy."""

    round: int
    region: RegionSpec
    footprint: tuple[float, float, float, float]
    patch: np.ndarray
    justification: str


@dataclass
class AgentView:
    """The state shown to the policy at one round."""

    thumbnail: np.ndarray
    prior_patches: list[PriorRoi]
    candidates: list[NormPoint] | None
    query: str
    round: int
    max_level: int
    roi_size: int = 1024
    anchor: str = "center"

    def __post_init__(self):
        if len(self.prior_patches) != self.round - 1:
            raise ValueError(
                f"round {self.round} view must carry {self.round - 1} prior "
                f"patches, got {len(self.prior_patches)}"
            )

    @property
    def prior(self):
        return self.prior_patches


def parse_decision(response: str) -> Decision:
    """Parse a policy response into a Decision.

    The last well-formed `<<x=..., y=..., level=...>>` line wins; the
    non-empty line immediately above it becomes the justification. A
    word-bounded TERMINATE (case-sensitive) short-circuits to a terminating
    decision. An optional `confidence=...` is honored in either form.

    Raises GrammarError when neither a coordinate line nor TERMINATE is
    present, CoordinateRangeError when x/y leave [0, 1], the level is
    negative, or a confidence leaves [0, 1].
    """
    lines = response.splitlines()

    def justification_above(line_idx: int) -> str:
        for i in range(line_idx - 1, -1, -1):
            text = lines[i].strip().strip('"')
            if text:
                return text
        return NO_JUSTIFICATION

    term = _TERMINATE_RE.search(response)
    if term:
        conf = _CONFIDENCE_RE.search(response)
        stop_conf = 1.0
        if conf:
            stop_conf = float(conf.group(1))
            if not 0.0 <= stop_conf <= 1.0:
                raise CoordinateRangeError(f"confidence {stop_conf} outside [0, 1]")
        idx = next(
            i for i, ln in enumerate(lines) if _TERMINATE_RE.search(ln)
        )
        return Decision(
            point=None,
            level=None,
            justification=justification_above(idx),
            terminate=True,
            stop_confidence=stop_conf,
        )

    matches = list(_COORD_RE.finditer(response))
    if not matches:
        raise GrammarError(
            "response contains neither a well-formed coordinate line nor TERMINATE"
        )
    m = matches[-1]
    x, y = float(m.group(1)), float(m.group(2))
    level = int(m.group(3))
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise CoordinateRangeError(f"coordinates ({x}, {y}) outside [0, 1]")
    if level < 0:
        raise CoordinateRangeError(f"negative level {level}")
    stop_conf = 0.0
    if m.group(4) is not None:
        stop_conf = float(m.group(4))
        if not 0.0 <= stop_conf <= 1.0:
            raise CoordinateRangeError(f"confidence {stop_conf} outside [0, 1]")
    line_idx = response[: m.start()].count("\n")
    return Decision(
        point=NormPoint(x, y),
        level=level,
        justification=justification_above(line_idx),
        terminate=False,
        stop_confidence=stop_conf,
    )


def format_decision(d: Decision) -> str:
    """Render a Decision in the response grammar (inverse of parse_decision)."""
    if d.terminate:
        return TERMINATE_TOKEN
    suffix = ""
    if d.stop_confidence:
        suffix = f", confidence={d.stop_confidence:.4f}"
    return (
        f"{d.justification}\n"
        f"<<x={d.point.x:.4f}, y={d.point.y:.4f}, level={d.level}{suffix}>>"
    )


def snap_to_candidates(
    point: NormPoint, candidates: list[NormPoint], delta: float
) -> NormPoint:
    """Snap a parsed point to the nearest candidate within `delta`.

    Proposal rounds require the policy to pick from the list; 4-decimal
    rounding in prompts means echoes rarely match exactly. Points farther
    than `delta` from every candidate raise OffCandidateError.
    """
    best = min(candidates, key=lambda c: (point.distance(c), c.y, c.x))
    if point.distance(best) > delta:
        raise OffCandidateError(
            f"point ({point.x:.4f}, {point.y:.4f}) is farther than {delta} "
            "from every listed candidate"
        )
    return best


class ChatPolicy:
    """Prompt a chat model, parse the reply, and enforce round contracts.

    On a grammar or range failure the request is retried once with a format
    reminder appended; a second failure propagates. In proposal rounds the
    parsed point must land within `snap_delta` of a listed candidate and is
    snapped onto it.
    """

    def __init__(self, client, snap_delta: float = 0.01):
        self.client = client
        self.snap_delta = snap_delta

    def _ask(self, bundle: PromptBundle) -> Decision:
        response = self.client.complete_bundle(bundle)
        try:
            return parse_decision(response)
        except (GrammarError, CoordinateRangeError):
            retry = PromptBundle(
                system_text=bundle.system_text,
                user_text=bundle.user_text + format_reminder(),
                images=bundle.images,
            )
            return parse_decision(self.client.complete_bundle(retry))

    def __call__(self, view: AgentView, task: str) -> Decision:
        bundle = build_round_prompt(view, task)
        decision = self._ask(bundle)
        if decision.terminate:
            return decision
        if decision.level > view.max_level:
            raise CoordinateRangeError(
                f"level {decision.level} exceeds slide maximum {view.max_level}"
            )
        if view.candidates is not None:
            snapped = snap_to_candidates(decision.point, view.candidates, self.snap_delta)
            if snapped is not decision.point:
                decision = Decision(
                    point=snapped,
                    level=decision.level,
                    justification=decision.justification,
                    terminate=False,
                    stop_confidence=decision.stop_confidence,
                )
        return decision


class OraclePolicy:
    """Ground-truth-guided policy for test harnesses.

    Picks the candidate nearest any planted lesion center in proposal rounds
    and the nearest lesion center itself in free rounds; terminates once the
    previous region's window overlaps a lesion by at least
    `overlap_threshold` (intersection over the smaller area). Equidistant
    lesions tie-break by lower (y, x) center.
    """

    def __init__(self, lesions, overlap_threshold: float = 0.5):
        if not lesions:
            raise ValueError("oracle policy needs at least one planted lesion")
        self.lesions = list(lesions)
        self.overlap_threshold = overlap_threshold

    def _centers(self):
        for les in self.lesions:
            x0, y0, x1, y1 = les.rect
            yield ((x0 + x1) / 2, (y0 + y1) / 2)

    def _nearest_center(self, p: NormPoint) -> tuple[float, float]:
        return min(
            self._centers(),
            key=lambda c: (np.hypot(p.x - c[0], p.y - c[1]), c[1], c[0]),
        )

    def _overlap(self, footprint) -> float:
        from pathnav.synthetic import rect_overlap_fraction

        return max(
            rect_overlap_fraction(footprint, les.rect) for les in self.lesions
        )

    def __call__(self, view: AgentView, task: str) -> Decision:
        if view.prior_patches:
            last = view.prior_patches[-1]
            if self._overlap(last.footprint) >= self.overlap_threshold:
                return Decision(
                    point=None,
                    level=None,
                    justification="sufficient evidence gathered",
                    terminate=True,
                    stop_confidence=1.0,
                )
        if view.candidates is not None:
            # Nearest candidate to any lesion center; ties keep the lowest index.
            def dist(c: NormPoint) -> float:
                return min(np.hypot(c.x - cx, c.y - cy) for cx, cy in self._centers())

            _, point = min(
                enumerate(view.candidates), key=lambda ic: (dist(ic[1]), ic[0])
            )
        else:
            ref = view.prior_patches[-1].region.center if view.prior_patches else NormPoint(0.5, 0.5)
            cx, cy = self._nearest_center(ref)
            point = NormPoint(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0))
        return Decision(
            point=point,
            level=0,
            justification="region closest to suspected lesion",
            terminate=False,
            stop_confidence=0.0,
        )


class ScriptedPolicy:
    """Replays a fixed list of grammar-formatted responses, one per call."""

    def __init__(self, responses: list[str]):
        self.responses = list(responses)
        self._i = 0

    def __call__(self, view: AgentView, task: str) -> Decision:
        if self._i >= len(self.responses):
            raise GrammarError("scripted policy exhausted its transcript")
        response = self.responses[self._i]
        self._i += 1
        decision = parse_decision(response)
        if not decision.terminate and view.candidates is not None:
            snapped = snap_to_candidates(decision.point, view.candidates, 0.01)
            decision = Decision(
                point=snapped,
                level=decision.level,
                justification=decision.justification,
                terminate=False,
                stop_confidence=decision.stop_confidence,
            )
        return decision


class FunctionPolicy:
    """Wraps a plain function for ad-hoc mock policies in tests."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, view: AgentView, task: str) -> Decision:
        return self.fn(view, task)
