"""The navigation loop: spaced proposals, free exploration, early stopping.

Rounds 1..proposal_rounds present the policy with freshly sampled, spaced
candidate coordinates (previously visited points act as spacing exclusions);
later rounds let it roam the continuous coordinate space. After every round
the loop stops on an explicit terminate signal, a stop confidence above the
gate, or the round cap. Each extracted region is appended to the trajectory,
which doubles as the agent's memory and the audit log.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from pathnav.errors import (
    CapacityError,
    ConfigError,
    DegenerateSlideError,
    EmptyEvidenceError,
    NavigationError,
    PathnavError,
)
from pathnav.policy import AgentView, Decision, PriorRoi
from pathnav.rng import substream
from pathnav.slide import (
    NormPoint,
    PyramidSlide,
    RegionSpec,
    TissueMask,
    compute_tissue_mask,
    extract_region,
    norm_footprint,
    render_thumbnail,
)

logger = logging.getLogger(__name__)

REASON_TERMINATE = "terminate-signal"
REASON_CONFIDENCE = "confidence-gate"
REASON_ROUND_CAP = "round-cap"
REASON_ERROR = "error"
REASON_BASELINE = "baseline"
VALID_REASONS = (REASON_TERMINATE, REASON_CONFIDENCE, REASON_ROUND_CAP, REASON_ERROR)


@dataclass
class NavConfig:
    """Knobs of one navigation run; defaults match the reference protocol."""

    K: int = 20
    delta: float = 0.01
    T: int = 10
    proposal_rounds: int = 3
    tau_stop: float = 0.5
    roi_size: int = 1024
    seed: int = 0
    anchor: str = "center"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if not 1 <= self.proposal_rounds <= self.T:
            raise ConfigError("need 1 <= proposal_rounds <= T")
        if self.roi_size <= 0:
            raise ConfigError("roi_size must be positive")
        if self.anchor not in ("center", "corner"):
            raise ConfigError(f"unknown anchor {self.anchor!r}")


@dataclass
class CandidateSet:
    """Spaced candidate coordinates offered to the policy in one round."""

    points: list[NormPoint]
    round: int


@dataclass
class RoiRecord:
    """One visited region: geometry, pixels, and the policy's reasoning."""

    round: int
    region: RegionSpec
    footprint: tuple[float, float, float, float]
    justification: str
    stop_confidence: float
    patch: np.ndarray | None = None
    patch_ref: str | None = None


@dataclass
class Trajectory:
    """The ordered evidence chain of one navigation run."""

    slide_id: str
    task: str
    records: list[RoiRecord]
    termination_reason: str
    config: NavConfig

    def validate(self) -> None:
        if len(self.records) > self.config.T:
            raise ValueError("trajectory longer than the round cap")
        if self.records and self.records[0].round != 1:
            raise ValueError("trajectory must start at round 1")
        for i, rec in enumerate(self.records):
            if i and rec.round <= self.records[i - 1].round:
                raise ValueError("trajectory rounds must be strictly increasing")


def propose_candidates(
    mask: TissueMask,
    cfg: NavConfig,
    rng: np.random.Generator,
    exclusions: list[NormPoint] = (),
    round: int = 0,
) -> CandidateSet:
    """Dart-throw K spaced points into the tissue foreground.

    Uniform samples over the unit square are rejected unless they land in a
    foreground cell and keep Euclidean distance >= delta from every accepted
    point and every exclusion. Deterministic for a given generator state.
    Raises CapacityError after 10000*K attempts place fewer than K points.
    """
    if not mask.grid.any():
        raise DegenerateSlideError("tissue mask has no foreground")
    blockers = np.array(
        [[p.x, p.y] for p in exclusions], dtype=np.float64
    ).reshape(-1, 2)
    accepted = np.empty((0, 2), dtype=np.float64)
    max_attempts = 10_000 * cfg.K
    attempts = 0
    batch = 256
    while accepted.shape[0] < cfg.K and attempts < max_attempts:
        n = min(batch, max_attempts - attempts)
        xy = rng.random((n, 2))
        attempts += n
        keep = mask.contains_xy(xy[:, 0], xy[:, 1])
        for x, y in xy[keep]:
            others = np.vstack([blockers, accepted])
            if others.size:
                d2 = np.min((others[:, 0] - x) ** 2 + (others[:, 1] - y) ** 2)
                if d2 < cfg.delta ** 2:
                    continue
            accepted = np.vstack([accepted, (x, y)])
            if accepted.shape[0] == cfg.K:
                break
    if accepted.shape[0] < cfg.K:
        raise CapacityError(
            f"placed only {accepted.shape[0]} of {cfg.K} candidates after "
            f"{max_attempts} attempts (spacing {cfg.delta})"
        )
    points = [NormPoint(float(x), float(y)) for x, y in accepted]
    return CandidateSet(points=points, round=round)


def should_stop(d: Decision, t: int, cfg: NavConfig) -> tuple[bool, str | None]:
    """Stop on terminate, stop_confidence strictly above the gate, or t == T."""
    if d.terminate:
        return True, REASON_TERMINATE
    if d.stop_confidence is not None and d.stop_confidence > cfg.tau_stop:
        return True, REASON_CONFIDENCE
    if t >= cfg.T:
        return True, REASON_ROUND_CAP
    return False, None


@dataclass
class NavState:
    """Mutable loop state threaded through step()."""

    task: str
    mask: TissueMask
    rng: np.random.Generator
    round: int = 1
    records: list[RoiRecord] = field(default_factory=list)
    stopped: bool = False
    reason: str | None = None


def step(state: NavState, slide: PyramidSlide, policy, cfg: NavConfig) -> tuple[NavState, Decision]:
    """Run one round: build the view, ask the policy, extract on a non-stop.

    Candidates are attached (and freshly sampled, with prior picks as
    exclusions) only while round <= proposal_rounds. A terminating decision
    records no region.
    """
    if state.stopped:
        raise NavigationError("step() called on a stopped navigation")
    if state.round > cfg.T:
        raise NavigationError("step() called past the round cap")
    t = state.round
    candidates = None
    if t <= cfg.proposal_rounds:
        exclusions = [rec.region.center for rec in state.records]
        candidates = propose_candidates(state.mask, cfg, state.rng, exclusions, round=t).points
    thumbnail = render_thumbnail(slide, overlays=[rec.region for rec in state.records])
    view = AgentView(
        thumbnail=thumbnail,
        prior_patches=[
            PriorRoi(
                round=rec.round,
                region=rec.region,
                footprint=rec.footprint,
                patch=rec.patch,
                justification=rec.justification,
            )
            for rec in state.records
        ],
        candidates=candidates,
        query=state.task,
        round=t,
        max_level=slide.level_count - 1,
        roi_size=cfg.roi_size,
        anchor=cfg.anchor,
    )
    decision = policy(view, state.task)
    if decision.terminate:
        state.stopped = True
        state.reason = REASON_TERMINATE
    else:
        if candidates is None and not state.mask.contains(decision.point):
            logger.warning(
                "slide %s round %d: free-round pick (%.4f, %.4f) is outside "
                "the tissue foreground",
                slide.slide_id,
                t,
                decision.point.x,
                decision.point.y,
            )
        if candidates is None and any(
            decision.point.distance(rec.region.center) < cfg.delta
            for rec in state.records
        ):
            logger.info(
                "slide %s round %d: revisiting a previously extracted center",
                slide.slide_id,
                t,
            )
        region = RegionSpec(decision.point, decision.level, cfg.roi_size)
        patch = extract_region(slide, region, anchor=cfg.anchor)
        state.records.append(
            RoiRecord(
                round=t,
                region=region,
                footprint=norm_footprint(slide, region),
                justification=decision.justification,
                stop_confidence=decision.stop_confidence,
                patch=patch,
            )
        )
        stop, why = should_stop(decision, t, cfg)
        if stop:
            state.stopped = True
            state.reason = why
    state.round += 1
    return state, decision


def run_navigation(slide: PyramidSlide, task: str, policy, cfg: NavConfig) -> Trajectory:
    """Loop step/should_stop from round 1 until a stop signal or the cap.

    Raises EmptyEvidenceError when the policy terminates before any region
    was extracted, and NavigationError (carrying the partial trajectory) when
    a round fails mid-run.
    """
    mask = compute_tissue_mask(slide)
    state = NavState(
        task=task,
        mask=mask,
        rng=substream(cfg.seed, f"candidates:{slide.slide_id}"),
    )
    while not state.stopped:
        try:
            step(state, slide, policy, cfg)
        except (EmptyEvidenceError, NavigationError):
            raise
        except PathnavError as exc:
            partial = Trajectory(
                slide_id=slide.slide_id,
                task=task,
                records=state.records,
                termination_reason=REASON_ERROR,
                config=cfg,
            )
            raise NavigationError(
                f"navigation failed at round {state.round}: {exc}", partial=partial
            ) from exc
    if not state.records:
        raise EmptyEvidenceError(
            f"slide {slide.slide_id}: policy terminated before extracting any region"
        )
    traj = Trajectory(
        slide_id=slide.slide_id,
        task=task,
        records=state.records,
        termination_reason=state.reason,
        config=cfg,
    )
    traj.validate()
    return traj


def select_evidence(traj: Trajectory, mode: str = "single", k: int = 5) -> list[RoiRecord]:
    """Evidence for downstream tasks: the final region, or the last k."""
    if not traj.records:
        raise EmptyEvidenceError("trajectory has no records")
    if mode == "single":
        return [traj.records[-1]]
    if mode == "multi":
        if k < 1:
            raise ValueError("k must be at least 1")
        return traj.records[-min(k, len(traj.records)) :]
    raise ValueError(f"unknown evidence mode {mode!r}")


def patch_filename(slide_id: str, round: int) -> str:
    return f"{slide_id}_r{round:02d}.png"


def write_trajectory(traj: Trajectory, out_dir, run_timestamp: str) -> Path:
    """Persist one trajectory: JSONL records plus lossless patch rasters.

    Output layout under `out_dir/<slide_id>/`: `trajectory.jsonl` with one
    record per round, `meta.json` with task/reason/config, and
    `patches/<slide_id>_r<round>.png` keyed by (slide id, round). All bytes
    are deterministic given the trajectory and the timestamp string.
    """
    out_dir = Path(out_dir)
    slide_dir = out_dir / traj.slide_id
    patches_dir = slide_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)
    with open(slide_dir / "trajectory.jsonl", "w", encoding="utf-8") as fh:
        for rec in traj.records:
            name = patch_filename(traj.slide_id, rec.round)
            if rec.patch is not None:
                Image.fromarray(rec.patch).save(patches_dir / name)
                rec.patch_ref = f"patches/{name}"
            fh.write(
                json.dumps(
                    {
                        "slide_id": traj.slide_id,
                        "round": rec.round,
                        "x": rec.region.center.x,
                        "y": rec.region.center.y,
                        "level": rec.region.level,
                        "justification": rec.justification,
                        "stop_confidence": rec.stop_confidence,
                        "timestamp": run_timestamp,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    meta = {
        "slide_id": traj.slide_id,
        "task": traj.task,
        "termination_reason": traj.termination_reason,
        "config": asdict(traj.config),
    }
    (slide_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return slide_dir


def read_trajectory(slide_dir, load_patches: bool = True) -> Trajectory:
    """Load a persisted trajectory; footprints are left unset (slide-relative)."""
    slide_dir = Path(slide_dir)
    meta = json.loads((slide_dir / "meta.json").read_text(encoding="utf-8"))
    cfg = NavConfig(**meta["config"])
    records = []
    with open(slide_dir / "trajectory.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            patch = None
            ref = f"patches/{patch_filename(rec['slide_id'], rec['round'])}"
            if load_patches and (slide_dir / ref).exists():
                patch = np.asarray(Image.open(slide_dir / ref).convert("RGB"))
            records.append(
                RoiRecord(
                    round=rec["round"],
                    region=RegionSpec(
                        NormPoint(rec["x"], rec["y"]), rec["level"], cfg.roi_size
                    ),
                    footprint=(0.0, 0.0, 0.0, 0.0),
                    justification=rec["justification"],
                    stop_confidence=rec["stop_confidence"],
                    patch=patch,
                    patch_ref=ref,
                )
            )
    return Trajectory(
        slide_id=meta["slide_id"],
        task=meta["task"],
        records=records,
        termination_reason=meta["termination_reason"],
        config=cfg,
    )
