"""Command-line interface.

Commands: generate-slides, navigate, baseline, task, evaluate, and cache
{inspect, freeze}. Every run writes a manifest capturing the config, seed,
cache digest, and tool version; re-running from a manifest with a frozen
cache reproduces outputs byte for byte. Exit codes: 0 success, 1 partial
failure (some slides failed, artifacts for the rest are preserved), 2
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import sys
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

import pathnav
from pathnav.agent import (
    NavConfig,
    REASON_BASELINE,
    RoiRecord,
    Trajectory,
    read_trajectory,
    run_navigation,
    select_evidence,
    write_trajectory,
)
from pathnav.baselines import BaselineConfig, majority_vote, random_rois, single_turn_select
from pathnav.chat import CachingChatClient, HttpChatClient, ResponseCache
from pathnav.config import cfg_get, flatten, load_config
from pathnav.errors import (
    CacheMissError,
    ConfigError,
    PathnavError,
    TaskError,
    UnmatchedCasesError,
)
from pathnav.metrics import (
    SurvivalRecord,
    accuracy,
    bootstrap_ci,
    checklist_accuracy,
    judge_score,
    km_estimate,
    logrank_test,
    macro_f1,
    paired_t_test,
)
from pathnav.policy import AgentView, Decision, OraclePolicy, ScriptedPolicy
from pathnav.rng import substream
from pathnav.slide import (
    NormPoint,
    compute_tissue_mask,
    extract_region,
    norm_footprint,
    open_slide,
    render_thumbnail,
)
from pathnav.synthetic import load_sidecar, random_slide_spec, sidecar_path, generate_synthetic_slide
from pathnav.tasks import (
    PredictionRecord,
    TaskSpec,
    answer_vqa,
    categorize_question,
    extract_checklist,
    generate_report,
    load_checklist,
    load_label_sets,
    load_vqa_questions,
    navigation_query,
    predict_risk,
    predict_subtype,
)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


# --------------------------------------------------------------- utilities


def _now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _run_timestamp(tree: dict) -> str:
    ts = cfg_get(tree, "run.timestamp")
    return ts if ts else _now_iso()


def _nav_config(tree: dict) -> NavConfig:
    nav = cfg_get(tree, "nav", {}) or {}
    return NavConfig(
        K=nav.get("K", 20),
        delta=nav.get("delta", 0.01),
        T=nav.get("T", 10),
        proposal_rounds=nav.get("proposal_rounds", 3),
        tau_stop=nav.get("tau_stop", 0.5),
        roi_size=nav.get("roi_size", 1024),
        seed=cfg_get(tree, "seed", 0),
        anchor=nav.get("anchor", "center"),
    )


def _baseline_config(tree: dict) -> BaselineConfig:
    base = cfg_get(tree, "baseline", {}) or {}
    matched = base.get("matched_m")
    return BaselineConfig(
        random_K=base.get("random_K", 21),
        single_turn_K=base.get("single_turn_K", 20),
        matched_m=matched if matched else None,
        seed=cfg_get(tree, "seed", 0),
        roi_size=cfg_get(tree, "nav.roi_size", 1024),
    )


def _list_slides(tree: dict) -> list[Path]:
    store = cfg_get(tree, "slides")
    if not store:
        raise ConfigError("config needs a 'slides' directory")
    store = Path(store)
    names = cfg_get(tree, "slide_names")
    if names:
        return [store / f"{n.strip()}.pyr" for n in str(names).split(",") if n.strip()]
    if not store.is_dir():
        raise ConfigError(f"slide store {store} does not exist")
    return sorted(store.glob("*.pyr"))


def _chat_client(tree: dict) -> CachingChatClient:
    cache_path = cfg_get(tree, "cache.path")
    if not cache_path:
        raise ConfigError("chat policy needs cache.path")
    cache = ResponseCache(cache_path)
    frozen = bool(cfg_get(tree, "cache.frozen", False)) or cache.frozen
    inner = None
    if not frozen:
        try:
            inner = HttpChatClient.from_env()
        except PathnavError:
            inner = None  # offline: cache hits still work, misses fail fast
    return CachingChatClient(cache, inner=inner)


class _SeededMockPolicy:
    """Offline stand-in policy: random spaced picks, random stopping."""

    def __init__(self, seed: int, slide_id: str):
        self.rng = substream(seed, f"mock-policy:{slide_id}")

    def __call__(self, view: AgentView, task: str) -> Decision:
        if view.round >= 2 and self.rng.random() < 0.25:
            return Decision(None, None, "", terminate=True, stop_confidence=1.0)
        if view.candidates is not None:
            point = view.candidates[int(self.rng.integers(len(view.candidates)))]
        else:
            point = NormPoint(float(self.rng.random()), float(self.rng.random()))
        conf = float(self.rng.random() * 0.6)
        return Decision(point, 0, "mock exploration", stop_confidence=conf)


def _build_policy(tree: dict, slide_path: Path):
    kind = cfg_get(tree, "policy", "oracle")
    if kind == "oracle":
        truth = load_sidecar(sidecar_path(slide_path))
        return OraclePolicy(truth)
    if kind == "mock":
        return _SeededMockPolicy(cfg_get(tree, "seed", 0), slide_path.stem)
    if kind == "scripted":
        tdir = cfg_get(tree, "scripted.dir")
        if not tdir:
            raise ConfigError("scripted policy needs scripted.dir")
        tfile = Path(tdir) / f"{slide_path.stem}.txt"
        if not tfile.is_file():
            raise ConfigError(f"no transcript for slide {slide_path.stem} in {tdir}")
        responses = [
            block.strip()
            for block in tfile.read_text(encoding="utf-8").split("\n---\n")
            if block.strip()
        ]
        return ScriptedPolicy(responses)
    if kind == "chat":
        from pathnav.policy import ChatPolicy

        return ChatPolicy(_chat_client(tree), snap_delta=cfg_get(tree, "nav.delta", 0.01))
    raise ConfigError(f"unknown policy {kind!r}")


def _write_manifest(out_dir: Path, tree: dict, command: str, timestamp: str, slides: list[dict]):
    cache_path = cfg_get(tree, "cache.path")
    cache_digest = ""
    if cache_path and Path(cache_path).exists():
        cache_digest = ResponseCache(cache_path).content_digest()
    manifest = {
        "tool_version": pathnav.__version__,
        "command": command,
        "seed": cfg_get(tree, "seed", 0),
        "run_timestamp": timestamp,
        "cache_digest": cache_digest,
        "config": flatten(tree),
        "slides": slides,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _run_pool(fn, items, workers: int) -> list:
    """Apply fn over items with a bounded worker pool, preserving order.

    Per-slide artifacts are independent; the response cache is the only
    shared writer and serializes its own appends.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_tree(args) -> dict:
    if getattr(args, "from_manifest", None):
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        tree: dict = {}
        from pathnav.config import parse_config_text

        text = "\n".join(f"{k} = {v}" for k, v in manifest["config"].items())
        tree = parse_config_text(text)
        tree.setdefault("run", {})["timestamp"] = manifest["run_timestamp"]
        return tree
    if not args.config:
        raise ConfigError("--config (or --from-manifest) is required")
    return load_config(args.config)


# ------------------------------------------------------------------ navigate


def _navigation_task_text(tree: dict) -> str:
    """Explicit task.query wins; otherwise derive it from the task kind."""
    explicit = cfg_get(tree, "task.query")
    if explicit:
        return explicit
    if cfg_get(tree, "task.kind"):
        return navigation_query(_build_task_spec(tree))
    return "Locate the most diagnostic region."


def cmd_navigate(args) -> int:
    try:
        tree = _load_tree(args)
        cfg = _nav_config(tree)
        slides = _list_slides(tree)
        out_dir = Path(cfg_get(tree, "output", "runs/navigate"))
        task_text = _navigation_task_text(tree)
    except (ConfigError, PathnavError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    timestamp = _run_timestamp(tree)

    def one_slide(slide_path: Path) -> dict:
        entry = {"slide": slide_path.stem, "status": "ok"}
        try:
            slide = open_slide(slide_path)
            policy = _build_policy(tree, slide_path)
            traj = run_navigation(slide, task_text, policy, cfg)
            slide_dir = write_trajectory(traj, out_dir, timestamp)
            overlays = [rec.region for rec in traj.records]
            Image.fromarray(render_thumbnail(slide, overlays=overlays)).save(
                slide_dir / "overlay.png"
            )
            entry["rounds"] = len(traj.records)
            entry["termination_reason"] = traj.termination_reason
            slide.close()
        except PathnavError as exc:
            entry["status"] = "error"
            entry["error"] = str(exc)
            print(f"slide {slide_path.stem}: {exc}", file=sys.stderr)
        return entry

    statuses = _run_pool(one_slide, slides, cfg_get(tree, "workers", 1))
    failures = sum(1 for e in statuses if e["status"] == "error")
    _write_manifest(out_dir, tree, "navigate", timestamp, statuses)
    return EXIT_PARTIAL if failures else EXIT_OK


# ------------------------------------------------------------------ baseline


def _baseline_trajectory(slide, regions, cfg: NavConfig, task_text: str) -> Trajectory:
    records = []
    for i, region in enumerate(regions, start=1):
        patch = extract_region(slide, region, anchor=cfg.anchor)
        records.append(
            RoiRecord(
                round=i,
                region=region,
                footprint=norm_footprint(slide, region),
                justification="baseline selection",
                stop_confidence=0.0,
                patch=patch,
            )
        )
    return Trajectory(
        slide_id=slide.slide_id,
        task=task_text,
        records=records,
        termination_reason=REASON_BASELINE,
        config=cfg,
    )


def cmd_baseline(args) -> int:
    try:
        tree = _load_tree(args)
        cfg = _nav_config(tree)
        bcfg = _baseline_config(tree)
        slides = _list_slides(tree)
        which = args.which
        out_dir = Path(cfg_get(tree, "output", f"runs/baseline-{which}"))
        task_text = cfg_get(tree, "task.query", "Locate the most diagnostic region.")
    except (ConfigError, PathnavError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    timestamp = _run_timestamp(tree)

    def one_slide(slide_path: Path) -> dict:
        entry = {"slide": slide_path.stem, "status": "ok", "which": which}
        try:
            slide = open_slide(slide_path)
            mask = compute_tissue_mask(slide)
            if which == "majority":
                k = bcfg.matched_m or bcfg.random_K
                rng = substream(bcfg.seed, f"random-rois:{slide.slide_id}")
                regions = random_rois(mask, slide, k, rng, roi_size=bcfg.roi_size)
            else:
                m = bcfg.matched_m or 1
                rng = substream(bcfg.seed, f"single-turn:{slide.slide_id}")
                from pathnav.agent import propose_candidates

                cand_cfg = NavConfig(
                    K=bcfg.single_turn_K,
                    delta=cfg.delta,
                    seed=bcfg.seed,
                    roi_size=bcfg.roi_size,
                )
                candidates = propose_candidates(mask, cand_cfg, rng, round=1).points
                view = AgentView(
                    thumbnail=render_thumbnail(slide),
                    prior_patches=[],
                    candidates=candidates,
                    query=task_text,
                    round=1,
                    max_level=slide.level_count - 1,
                    roi_size=bcfg.roi_size,
                    anchor=cfg.anchor,
                )
                policy = _build_policy(tree, slide_path)
                regions = single_turn_select(
                    view, policy, m=m, snap_delta=cfg.delta, roi_size=bcfg.roi_size
                )
            traj = _baseline_trajectory(slide, regions, cfg, task_text)
            write_trajectory(traj, out_dir, timestamp)
            entry["regions"] = len(regions)
            slide.close()
        except PathnavError as exc:
            entry["status"] = "error"
            entry["error"] = str(exc)
            print(f"slide {slide_path.stem}: {exc}", file=sys.stderr)
        return entry

    statuses = _run_pool(one_slide, slides, cfg_get(tree, "workers", 1))
    failures = sum(1 for e in statuses if e["status"] == "error")
    _write_manifest(out_dir, tree, f"baseline-{which}", timestamp, statuses)
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------- task


class _ScriptedTaskClient:
    """Replays replies from a text file (one per line) in call order."""

    def __init__(self, path):
        self.replies = [
            ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()
        ]
        self.calls = 0

    def complete_bundle(self, bundle):
        if self.calls >= len(self.replies):
            raise TaskError("scripted task client exhausted its replies")
        out = self.replies[self.calls]
        self.calls += 1
        return out


class _RecordingClient:
    """Pass-through that remembers the last raw reply for provenance."""

    def __init__(self, inner):
        self.inner = inner
        self.last = ""

    def complete_bundle(self, bundle):
        self.last = self.inner.complete_bundle(bundle)
        return self.last


def _task_client(tree: dict) -> _RecordingClient:
    responses = cfg_get(tree, "task.responses")
    if responses:
        return _RecordingClient(_ScriptedTaskClient(responses))
    return _RecordingClient(_chat_client(tree))


def _build_task_spec(tree: dict) -> TaskSpec:
    kind = cfg_get(tree, "task.kind")
    if kind not in ("subtyping", "vqa", "report", "checklist", "survival"):
        raise ConfigError(f"task.kind must be set to a known task, got {kind!r}")
    cancer = cfg_get(tree, "task.cancer_type", "BRCA")
    spec = TaskSpec(kind=kind, cancer_type=cancer)
    if kind == "subtyping":
        groups = load_label_sets(cfg_get(tree, "task.label_file"))
        if cancer not in groups:
            raise ConfigError(f"no label set for cancer type {cancer!r}")
        spec.label_set = groups[cancer]
    elif kind == "vqa":
        qfile = cfg_get(tree, "task.file")
        if not qfile:
            raise ConfigError("vqa task needs task.file")
        spec.questions = load_vqa_questions(qfile)
    elif kind == "checklist":
        cfile = cfg_get(tree, "task.file")
        if not cfile:
            raise ConfigError("checklist task needs task.file")
        spec.checklist = load_checklist(cfile)
    elif kind == "report":
        exdir = cfg_get(tree, "task.exemplars")
        if not exdir:
            raise ConfigError("report task needs task.exemplars (directory of 5 .txt)")
        spec.report_exemplars = [
            p.read_text(encoding="utf-8") for p in sorted(Path(exdir).glob("*.txt"))
        ]
    elif kind == "survival":
        exdir = cfg_get(tree, "task.exemplars")
        if not exdir:
            raise ConfigError("survival task needs task.exemplars (risk0/1/2.png)")
        exemplars = []
        for level in (0, 1, 2):
            img = Image.open(Path(exdir) / f"risk{level}.png").convert("RGB")
            exemplars.append((np.asarray(img), level))
        spec.risk_exemplars = exemplars
    return spec


def _evidence_for(tree: dict, traj: Trajectory):
    mode = cfg_get(tree, "evidence.mode", "single")
    k = cfg_get(tree, "evidence.k", 5)
    recs = select_evidence(traj, mode, k)
    patches = [rec.patch for rec in recs]
    refs = [f"{traj.slide_id}/{rec.patch_ref or rec.round}" for rec in recs]
    return patches, refs


def cmd_task(args) -> int:
    try:
        tree = _load_tree(args)
        spec = _build_task_spec(tree)
        traj_root = Path(cfg_get(tree, "trajectories", ""))
        if not traj_root.is_dir():
            raise ConfigError(f"trajectories directory {traj_root} does not exist")
        out_path = Path(cfg_get(tree, "output", "predictions.jsonl"))
        client = _task_client(tree)
    except (ConfigError, PathnavError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    slides_dir = cfg_get(tree, "slides")
    references = cfg_get(tree, "task.references")
    failures = 0
    records = []
    slide_dirs = sorted(
        p for p in traj_root.iterdir() if (p / "trajectory.jsonl").is_file()
    )
    for slide_dir in slide_dirs:
        try:
            traj = read_trajectory(slide_dir)
            case = traj.slide_id
            truth_label = ""
            if slides_dir:
                sc = sidecar_path(Path(slides_dir) / f"{case}.pyr")
                if sc.exists():
                    lesions = load_sidecar(sc)
                    truth_label = lesions[0].label if lesions else ""
            per_patch = traj.termination_reason == REASON_BASELINE and cfg_get(
                tree, "task.aggregate", "auto"
            ) != "joint"
            evidence, refs = _evidence_for(tree, traj)
            all_refs = [f"{case}/{r.patch_ref or r.round}" for r in traj.records]
            if spec.kind == "subtyping":
                if per_patch:
                    votes = [
                        predict_subtype([rec.patch], spec, client) for rec in traj.records
                    ]
                    pred = majority_vote(votes, spec.labels)
                    used = all_refs
                else:
                    pred = predict_subtype(evidence, spec, client)
                    used = refs
                records.append(
                    PredictionRecord(
                        case_id=case,
                        predicted=pred,
                        ground_truth=truth_label,
                        evidence=used,
                        raw_response=client.last,
                    )
                )
            elif spec.kind == "vqa":
                if per_patch:
                    per = [answer_vqa([rec.patch], spec, client) for rec in traj.records]
                    answers = [
                        majority_vote([p[i] for p in per], spec.questions[i].options)
                        for i in range(len(spec.questions))
                    ]
                    used = all_refs
                else:
                    answers = answer_vqa(evidence, spec, client)
                    used = refs
                raw = client.last
                for i, (q, ans) in enumerate(zip(spec.questions, answers)):
                    records.append(
                        PredictionRecord(
                            case_id=f"{case}#q{i}",
                            predicted=ans,
                            ground_truth=q.answer or "",
                            evidence=used,
                            raw_response=raw,
                            category=categorize_question(q.text),
                        )
                    )
            elif spec.kind == "report":
                ref_text = ""
                if references:
                    ref_file = Path(references) / f"{case}.txt"
                    if ref_file.is_file():
                        ref_text = ref_file.read_text(encoding="utf-8")
                members = (
                    [([rec.patch], [ref], m) for m, (rec, ref) in enumerate(zip(traj.records, all_refs))]
                    if per_patch
                    else [(evidence, refs, None)]
                )
                for patches, used, member in members:
                    text = generate_report(patches, spec, client)
                    rec = PredictionRecord(
                        case_id=case,
                        predicted=text,
                        ground_truth=ref_text,
                        evidence=used,
                        raw_response=text,
                        member=member,
                    )
                    if ref_text:
                        rec.score = judge_score(text, ref_text, client)
                    records.append(rec)
            elif spec.kind == "checklist":
                if not references:
                    raise ConfigError("checklist task needs task.references")
                ref_text = (Path(references) / f"{case}.txt").read_text(encoding="utf-8")
                reports_file = cfg_get(tree, "task.reports")
                if reports_file:
                    gen_text = _lookup_report(reports_file, case)
                else:
                    gen_text = generate_report(
                        evidence,
                        TaskSpec(
                            kind="report",
                            cancer_type=spec.cancer_type,
                            report_exemplars=["-"] * 5,
                        ),
                        client,
                    )
                pred_vec = extract_checklist(gen_text, spec.checklist, client)
                ref_vec = extract_checklist(ref_text, spec.checklist, client)
                agree = [int(p == r) for p, r in zip(pred_vec, ref_vec)]
                records.append(
                    PredictionRecord(
                        case_id=case,
                        predicted=pred_vec,
                        ground_truth=ref_vec,
                        evidence=refs,
                        raw_response=client.last,
                        case_accuracy=sum(agree) / len(agree),
                    )
                )
            elif spec.kind == "survival":
                if per_patch:
                    votes = [
                        predict_risk([rec.patch], spec, client) for rec in traj.records
                    ]
                    pred = majority_vote(votes, (0, 1, 2))
                    used = all_refs
                else:
                    pred = predict_risk(evidence, spec, client)
                    used = refs
                records.append(
                    PredictionRecord(
                        case_id=case,
                        predicted=pred,
                        evidence=used,
                        raw_response=client.last,
                    )
                )
        except PathnavError as exc:
            failures += 1
            print(f"case {slide_dir.name}: {exc}", file=sys.stderr)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    return EXIT_PARTIAL if failures else EXIT_OK


def _lookup_report(reports_file, case):
    for line in Path(reports_file).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["case_id"] == case:
            return rec["predicted"]
    raise TaskError(f"no generated report for case {case} in {reports_file}")


# ------------------------------------------------------------------ evaluate


def _load_predictions(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def _load_truth(path) -> dict:
    truth = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        truth[parts[0].strip()] = [p.strip() for p in parts[1:]]
    return truth


def cmd_evaluate(args) -> int:
    try:
        methods = {}
        for spec in args.predictions:
            if "=" not in spec:
                raise ConfigError("--predictions expects name=path")
            name, _, path = spec.partition("=")
            rows = _load_predictions(path)
            if not rows:
                raise UnmatchedCasesError(f"predictions file {path} is empty")
            methods[name] = rows
        truth = _load_truth(args.truth)
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)

        for name, rows in methods.items():
            missing = [
                r["case_id"]
                for r in rows
                if r["case_id"] not in truth
                and r["case_id"].split("#")[0] not in truth
            ]
            if missing:
                raise UnmatchedCasesError(
                    f"method {name}: {len(missing)} prediction case ids missing "
                    f"from ground truth (e.g. {missing[:3]})"
                )
    except (ConfigError, PathnavError) as exc:
        print(f"evaluate error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    cohort = args.cohort
    seed = args.seed
    table = []

    def truth_label(r):
        # The truth file is authoritative when it resolves the exact case id;
        # per-question tasks carry their answer embedded in the record, with
        # the base case id anchoring the join.
        cid = r["case_id"]
        if cid in truth:
            return truth[cid][0]
        embedded = r.get("ground_truth", "")
        if embedded:
            return str(embedded)
        return truth[cid.split("#")[0]][0]

    per_case_scalars: dict[str, dict[str, float]] = {}

    for name, rows in methods.items():
        scalars = {}
        if "accuracy" in metrics or "macro_f1" in metrics:
            preds = [str(r["predicted"]) for r in rows]
            labels = [truth_label(r) for r in rows]
            if "accuracy" in metrics:
                indicators = np.array(
                    [1.0 if p == y else 0.0 for p, y in zip(preds, labels)]
                )
                ci = bootstrap_ci(indicators, B=args.bootstrap, rng=substream(seed, f"acc:{name}"))
                table.append(("accuracy", cohort, name, accuracy(preds, labels), ci.lower, ci.upper, ""))
                scalars.update(
                    (r["case_id"], float(v)) for r, v in zip(rows, indicators)
                )
            if "macro_f1" in metrics:
                classes = tuple(sorted(set(labels)))
                point = macro_f1(preds, labels, classes)
                pairs = list(zip(preds, labels))
                rng = substream(seed, f"f1:{name}")
                reps = []
                for _ in range(args.bootstrap):
                    idx = rng.integers(0, len(pairs), size=len(pairs))
                    reps.append(
                        macro_f1(
                            [pairs[i][0] for i in idx], [pairs[i][1] for i in idx], classes
                        )
                    )
                lo, hi = np.percentile(reps, [2.5, 97.5])
                table.append(("macro_f1", cohort, name, point, float(lo), float(hi), ""))
        if "judge" in metrics:
            by_case: dict[str, list[float]] = {}
            for r in rows:
                if "score" in r:
                    by_case.setdefault(r["case_id"], []).append(float(r["score"]))
            if by_case:
                case_means = {c: float(np.mean(v)) for c, v in by_case.items()}
                vals = np.array(list(case_means.values()))
                ci = bootstrap_ci(vals, B=args.bootstrap, rng=substream(seed, f"judge:{name}"))
                table.append(("judge_mean", cohort, name, float(vals.mean()), ci.lower, ci.upper, ""))
                scalars.update(case_means)
        if "checklist" in metrics:
            pred_vecs = [r["predicted"] for r in rows if "case_accuracy" in r]
            ref_vecs = [r["ground_truth"] for r in rows if "case_accuracy" in r]
            if pred_vecs:
                point = checklist_accuracy(pred_vecs, ref_vecs)
                accs = np.array([float(r["case_accuracy"]) for r in rows if "case_accuracy" in r])
                ci = bootstrap_ci(accs, B=args.bootstrap, rng=substream(seed, f"chk:{name}"))
                table.append(("checklist_accuracy", cohort, name, point, ci.lower, ci.upper, ""))
                scalars.update(
                    (r["case_id"], float(r["case_accuracy"]))
                    for r in rows
                    if "case_accuracy" in r
                )
        if "survival" in metrics:
            records = []
            for r in rows:
                months, event = truth[r["case_id"].split("#")[0]][:2]
                records.append(
                    SurvivalRecord(
                        time=float(months),
                        event=event in ("1", "true", "True"),
                        group=int(r["predicted"]),
                    )
                )
            res = logrank_test(records)
            table.append(
                (
                    f"logrank_chi2[df={res.df}]",
                    cohort,
                    name,
                    res.chi_squared,
                    "",
                    "",
                    res.p_value,
                )
            )
            for group in sorted({r.group for r in records}):
                curve = km_estimate([r for r in records if r.group == group])
                with open(out_dir / f"km_{name}_g{group}.csv", "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["time_months", "survival", "at_risk"])
                    for t, s, n in zip(curve.times, curve.survival, curve.at_risk):
                        writer.writerow([f"{t:.6g}", f"{s:.10g}", n])
        per_case_scalars[name] = scalars

    if args.compare:
        a, _, b = args.compare.partition(",")
        if a not in per_case_scalars or b not in per_case_scalars:
            print(f"evaluate error: --compare names must match --predictions", file=sys.stderr)
            return EXIT_CONFIG
        shared = sorted(set(per_case_scalars[a]) & set(per_case_scalars[b]))
        if len(shared) < 2:
            print("evaluate error: fewer than 2 shared cases to compare", file=sys.stderr)
            return EXIT_CONFIG
        res = paired_t_test(
            [per_case_scalars[a][c] for c in shared],
            [per_case_scalars[b][c] for c in shared],
        )
        table.append((f"paired_t:{a}-vs-{b}", cohort, f"{a},{b}", res.t_statistic, "", "", res.p_value))

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["metric", "cohort", "method", "estimate", "ci_low", "ci_high", "p_value"]
        )
        for row in table:
            writer.writerow(row)
    return EXIT_OK


# ------------------------------------------------------------ generate-slides


def cmd_generate_slides(args) -> int:
    try:
        tree = _load_tree(args)
        out_dir = Path(cfg_get(tree, "output", "runs/slides"))
        count = int(cfg_get(tree, "gen.count", 5))
        seed = cfg_get(tree, "seed", 0)
        width = int(cfg_get(tree, "gen.width", 4096))
        height = int(cfg_get(tree, "gen.height", 3072))
        labels = [
            s.strip() for s in str(cfg_get(tree, "gen.labels", "A,B,C")).split(",")
        ]
        tissue = float(cfg_get(tree, "gen.tissue_area", 0.45))
        lesion_frac = float(cfg_get(tree, "gen.lesion_frac", 0.02))
    except (ConfigError, PathnavError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir.mkdir(parents=True, exist_ok=True)
    statuses = []
    for i in range(count):
        label = labels[i % len(labels)]
        spec = random_slide_spec(
            seed=seed + i,
            width=width,
            height=height,
            label=label,
            label_set=tuple(labels),
            tissue_area=tissue,
            lesion_tissue_frac=lesion_frac,
        )
        name = f"slide{i:03d}"
        slide = generate_synthetic_slide(spec, out_dir / f"{name}.pyr")
        slide.close()
        statuses.append({"slide": name, "label": label, "status": "ok"})
        print(f"generated {name} ({label})")
    _write_manifest(out_dir, tree, "generate-slides", _run_timestamp(tree), statuses)
    return EXIT_OK


# --------------------------------------------------------------------- cache


def cmd_cache(args) -> int:
    cache = ResponseCache(args.cache)
    if args.action == "inspect":
        print(f"path: {cache.path}")
        print(f"records: {len(cache)}")
        print(f"digest: {cache.content_digest()}")
        print(f"frozen: {cache.frozen}")
        return EXIT_OK
    if args.action == "freeze":
        digest = cache.freeze()
        print(f"frozen {cache.path} at digest {digest}")
        return EXIT_OK
    return EXIT_CONFIG


# ---------------------------------------------------------------------- main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pathnav",
        description="Query-guided ROI navigation on pyramid slides, with "
        "baselines, task runners, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p):
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--from-manifest", help="re-run from a run manifest")

    p_nav = sub.add_parser("navigate", help="run the navigation agent per slide")
    add_config_opts(p_nav)

    p_base = sub.add_parser("baseline", help="run a comparison approach per slide")
    add_config_opts(p_base)
    p_base.add_argument("--which", choices=("majority", "single-turn"), required=True)

    p_task = sub.add_parser("task", help="run a downstream task over trajectories")
    add_config_opts(p_task)

    p_eval = sub.add_parser("evaluate", help="compute metrics over prediction files")
    p_eval.add_argument("--predictions", action="append", required=True, metavar="NAME=PATH")
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--metrics", default="accuracy")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--compare", default="", metavar="A,B")
    p_eval.add_argument("--cohort", default="default")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--bootstrap", type=int, default=1000)

    p_gen = sub.add_parser("generate-slides", help="write synthetic slides with ground truth")
    add_config_opts(p_gen)

    p_cache = sub.add_parser("cache", help="inspect or freeze a response cache")
    p_cache.add_argument("action", choices=("inspect", "freeze"))
    p_cache.add_argument("--cache", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "navigate":
            return cmd_navigate(args)
        if args.command == "baseline":
            return cmd_baseline(args)
        if args.command == "task":
            return cmd_task(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "generate-slides":
            return cmd_generate_slides(args)
        if args.command == "cache":
            return cmd_cache(args)
    except (ConfigError, CacheMissError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PathnavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception:
        traceback.print_exc()
        return EXIT_PARTIAL
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
