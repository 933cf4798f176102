"""End-to-end CLI flows on small synthetic slides."""

import csv
import json

import numpy as np
import pytest

from pathnav.cli import main

SLIDE_GEN_CFG = """
seed = 5
output = {out}
gen.count = {count}
gen.width = 2048
gen.height = 1536
gen.labels = A,B
gen.tissue_area = 0.4
gen.lesion_frac = 0.05
"""

NAV_CFG = """
seed = 11
slides = {slides}
output = {out}
policy = oracle
nav.roi_size = 256
run.timestamp = 2026-03-01T00:00:00Z
task.query = find the lesion
"""


@pytest.fixture(scope="module")
def slide_store(tmp_path_factory):
    out = tmp_path_factory.mktemp("store")
    cfg = out / "gen.cfg"
    cfg.write_text(SLIDE_GEN_CFG.format(out=out / "slides", count=5))
    assert main(["generate-slides", "--config", str(cfg)]) == 0
    return out / "slides"


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


def test_generate_slides_artifacts(slide_store):
    slides = sorted(slide_store.glob("*.pyr"))
    assert len(slides) == 5
    for p in slides:
        assert p.with_suffix(".truth").exists()
    manifest = json.loads((slide_store / "manifest.json").read_text())
    assert manifest["seed"] == 5
    assert len(manifest["slides"]) == 5


def test_navigate_five_slides(slide_store, tmp_path):
    cfg = write_cfg(tmp_path / "nav.cfg", NAV_CFG.format(slides=slide_store, out=tmp_path / "run"))
    assert main(["navigate", "--config", cfg]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert len(manifest["slides"]) == 5
    for entry in manifest["slides"]:
        assert entry["status"] == "ok"
        assert entry["rounds"] <= 10
        slide_dir = tmp_path / "run" / entry["slide"]
        lines = (slide_dir / "trajectory.jsonl").read_text().splitlines()
        assert 1 <= len(lines) <= 10
        assert (slide_dir / "overlay.png").exists()
        assert (slide_dir / "meta.json").exists()


def test_navigate_missing_slide_isolated(slide_store, tmp_path):
    cfg_text = NAV_CFG.format(slides=slide_store, out=tmp_path / "run") + "\nslide_names = slide000,ghost,slide001\n"
    cfg = write_cfg(tmp_path / "nav.cfg", cfg_text)
    assert main(["navigate", "--config", cfg]) == 1  # partial failure
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    by_name = {e["slide"]: e for e in manifest["slides"]}
    assert by_name["ghost"]["status"] == "error"
    assert by_name["slide000"]["status"] == "ok"
    assert (tmp_path / "run" / "slide000" / "trajectory.jsonl").exists()


def test_navigate_rerun_byte_identical(slide_store, tmp_path):
    cfg1 = write_cfg(tmp_path / "a.cfg", NAV_CFG.format(slides=slide_store, out=tmp_path / "runA"))
    cfg2 = write_cfg(tmp_path / "b.cfg", NAV_CFG.format(slides=slide_store, out=tmp_path / "runB"))
    assert main(["navigate", "--config", cfg1]) == 0
    assert main(["navigate", "--config", cfg2]) == 0
    for slide_dir in sorted((tmp_path / "runA").iterdir()):
        if not slide_dir.is_dir():
            continue
        other = tmp_path / "runB" / slide_dir.name
        assert (slide_dir / "trajectory.jsonl").read_bytes() == (
            other / "trajectory.jsonl"
        ).read_bytes()
        for patch in sorted((slide_dir / "patches").iterdir()):
            assert patch.read_bytes() == (other / "patches" / patch.name).read_bytes()


def test_navigate_worker_pool_matches_sequential(slide_store, tmp_path):
    cfg1 = write_cfg(
        tmp_path / "w1.cfg",
        NAV_CFG.format(slides=slide_store, out=tmp_path / "seq") + "\nworkers = 1\n",
    )
    cfg2 = write_cfg(
        tmp_path / "w2.cfg",
        NAV_CFG.format(slides=slide_store, out=tmp_path / "par") + "\nworkers = 3\n",
    )
    assert main(["navigate", "--config", cfg1]) == 0
    assert main(["navigate", "--config", cfg2]) == 0
    for slide_dir in sorted((tmp_path / "seq").iterdir()):
        if slide_dir.is_dir():
            a = (slide_dir / "trajectory.jsonl").read_bytes()
            b = (tmp_path / "par" / slide_dir.name / "trajectory.jsonl").read_bytes()
            assert a == b


def test_navigate_from_manifest_reproduces(slide_store, tmp_path):
    cfg = write_cfg(tmp_path / "nav.cfg", NAV_CFG.format(slides=slide_store, out=tmp_path / "runA"))
    assert main(["navigate", "--config", cfg]) == 0
    manifest = tmp_path / "runA" / "manifest.json"
    # Redirect output, keep everything else from the manifest.
    data = json.loads(manifest.read_text())
    data["config"]["output"] = str(tmp_path / "runB")
    manifest2 = tmp_path / "manifest2.json"
    manifest2.write_text(json.dumps(data))
    assert main(["navigate", "--from-manifest", str(manifest2)]) == 0
    a = (tmp_path / "runA" / "slide000" / "trajectory.jsonl").read_bytes()
    b = (tmp_path / "runB" / "slide000" / "trajectory.jsonl").read_bytes()
    assert a == b


def test_navigation_query_derived_from_task_kind(tmp_path):
    from pathnav.cli import _navigation_task_text
    from pathnav.config import parse_config_text

    tree = parse_config_text("task.kind = subtyping\ntask.cancer_type = BRCA\n")
    text = _navigation_task_text(tree)
    assert "IDC or ILC" in text
    tree = parse_config_text("task.query = custom question\n")
    assert _navigation_task_text(tree) == "custom question"


def test_navigate_bad_config_exit_2(tmp_path):
    cfg = write_cfg(tmp_path / "bad.cfg", "seed = 1\n")  # no slides key
    assert main(["navigate", "--config", cfg]) == 2


def test_baseline_majority_region_count(slide_store, tmp_path):
    cfg_text = NAV_CFG.format(slides=slide_store, out=tmp_path / "run") + (
        "\nbaseline.random_K = 21\nnav.roi_size = 128\nslide_names = slide000\n"
    )
    cfg = write_cfg(tmp_path / "c.cfg", cfg_text)
    assert main(["baseline", "--config", cfg, "--which", "majority"]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["slides"][0]["regions"] == 21
    lines = (tmp_path / "run" / "slide000" / "trajectory.jsonl").read_text().splitlines()
    assert len(lines) == 21
    meta = json.loads((tmp_path / "run" / "slide000" / "meta.json").read_text())
    assert meta["termination_reason"] == "baseline"


def test_baseline_single_turn_one_region(slide_store, tmp_path):
    cfg_text = NAV_CFG.format(slides=slide_store, out=tmp_path / "run") + "\nslide_names = slide000\n"
    cfg = write_cfg(tmp_path / "c.cfg", cfg_text)
    assert main(["baseline", "--config", cfg, "--which", "single-turn"]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["slides"][0]["regions"] == 1


def test_baseline_matched_m_both(slide_store, tmp_path):
    for which in ("majority", "single-turn"):
        out = tmp_path / f"run-{which}"
        cfg_text = NAV_CFG.format(slides=slide_store, out=out) + (
            "\nbaseline.matched_m = 3\nnav.roi_size = 128\nslide_names = slide000\n"
        )
        cfg = write_cfg(tmp_path / f"{which}.cfg", cfg_text)
        assert main(["baseline", "--config", cfg, "--which", which]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["slides"][0]["regions"] == 3


def test_task_subtyping_scripted(slide_store, tmp_path):
    nav_out = tmp_path / "nav"
    cfg = write_cfg(tmp_path / "nav.cfg", NAV_CFG.format(slides=slide_store, out=nav_out))
    assert main(["navigate", "--config", cfg]) == 0

    replies = tmp_path / "replies.txt"
    replies.write_text("IDC\nILC\nIDC\nIDC\nILC\n")
    task_cfg = write_cfg(
        tmp_path / "task.cfg",
        f"""
seed = 11
slides = {slide_store}
trajectories = {nav_out}
output = {tmp_path / 'preds.jsonl'}
task.kind = subtyping
task.cancer_type = BRCA
task.responses = {replies}
""",
    )
    assert main(["task", "--config", task_cfg]) == 0
    rows = [json.loads(l) for l in (tmp_path / "preds.jsonl").read_text().splitlines()]
    assert len(rows) == 5
    assert {r["predicted"] for r in rows} <= {"IDC", "ILC"}
    for r in rows:
        assert r["evidence"], "prediction must reference its evidence patches"
        assert r["raw_response"] in ("IDC", "ILC")
        assert r["ground_truth"] in ("A", "B")  # planted lesion labels


def test_task_vqa_scripted(slide_store, tmp_path):
    nav_out = tmp_path / "nav"
    cfg = write_cfg(tmp_path / "nav.cfg", NAV_CFG.format(slides=slide_store, out=nav_out))
    assert main(["navigate", "--config", cfg]) == 0

    qfile = tmp_path / "questions.tsv"
    qfile.write_text(
        "Is necrosis present?\tYes | No\tYes\n"
        "What is the histologic grade?\tGrade 1 | Grade 2\tGrade 2\n"
    )
    replies = tmp_path / "replies.txt"
    replies.write_text("Yes, Grade 2\n" * 5)
    task_cfg = write_cfg(
        tmp_path / "task.cfg",
        f"""
seed = 11
slides = {slide_store}
trajectories = {nav_out}
output = {tmp_path / 'vqa.jsonl'}
task.kind = vqa
task.file = {qfile}
task.responses = {replies}
""",
    )
    assert main(["task", "--config", task_cfg]) == 0
    rows = [json.loads(l) for l in (tmp_path / "vqa.jsonl").read_text().splitlines()]
    assert len(rows) == 10  # 5 slides x 2 questions
    cats = {r["category"] for r in rows}
    assert cats == {"structure", "grading/proliferation"}
    assert all(r["predicted"] in ("Yes", "Grade 2") for r in rows)


def test_task_survival_scripted(slide_store, tmp_path):
    nav_out = tmp_path / "nav"
    cfg = write_cfg(tmp_path / "nav.cfg", NAV_CFG.format(slides=slide_store, out=nav_out))
    assert main(["navigate", "--config", cfg]) == 0

    from PIL import Image

    exdir = tmp_path / "exemplars"
    exdir.mkdir()
    for level in (0, 1, 2):
        Image.fromarray(np.full((64, 64, 3), 40 * level, dtype=np.uint8)).save(
            exdir / f"risk{level}.png"
        )
    replies = tmp_path / "replies.txt"
    replies.write_text("0\n1\n2\n1\n0\n")
    task_cfg = write_cfg(
        tmp_path / "task.cfg",
        f"""
seed = 11
slides = {slide_store}
trajectories = {nav_out}
output = {tmp_path / 'risk.jsonl'}
task.kind = survival
task.exemplars = {exdir}
task.responses = {replies}
""",
    )
    assert main(["task", "--config", task_cfg]) == 0
    rows = [json.loads(l) for l in (tmp_path / "risk.jsonl").read_text().splitlines()]
    assert [r["predicted"] for r in rows] == [0, 1, 2, 1, 0]


def test_task_checklist_scripted(slide_store, tmp_path):
    nav_out = tmp_path / "nav"
    cfg_text = NAV_CFG.format(slides=slide_store, out=nav_out) + "\nslide_names = slide000,slide001\n"
    cfg = write_cfg(tmp_path / "nav.cfg", cfg_text)
    assert main(["navigate", "--config", cfg]) == 0

    form = tmp_path / "form.tsv"
    form.write_text("Necrosis?\tYes | No\tNo\nMargins clear?\tYes | No\tYes\n")
    refs = tmp_path / "refs"
    refs.mkdir()
    for name in ("slide000", "slide001"):
        (refs / f"{name}.txt").write_text("Reference report: no necrosis, margins clear.")
    # Per case: 1 generated report, 2 extractions from it, 2 from the reference.
    replies = tmp_path / "replies.txt"
    replies.write_text(
        "generated report A\nNo\nYes\nNo\nYes\n"
        "generated report B\nYes\nYes\nNo\nYes\n"
    )
    task_cfg = write_cfg(
        tmp_path / "task.cfg",
        f"""
seed = 11
slides = {slide_store}
trajectories = {nav_out}
output = {tmp_path / 'chk.jsonl'}
task.kind = checklist
task.file = {form}
task.references = {refs}
task.responses = {replies}
""",
    )
    assert main(["task", "--config", task_cfg]) == 0
    rows = [json.loads(l) for l in (tmp_path / "chk.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert rows[0]["case_accuracy"] == 1.0
    assert rows[1]["case_accuracy"] == 0.5


def test_evaluate_subtyping_fixture(tmp_path):
    preds = tmp_path / "preds.jsonl"
    rows = [
        {"case_id": f"c{i}", "predicted": p, "ground_truth": y}
        for i, (p, y) in enumerate(
            [("A", "A"), ("B", "B"), ("A", "B"), ("B", "B"), ("A", "A"), ("B", "A")]
        )
    ]
    preds.write_text("\n".join(json.dumps(r) for r in rows))
    truth = tmp_path / "truth.tsv"
    truth.write_text("\n".join(f"c{i}\t{r['ground_truth']}" for i, r in enumerate(rows)))
    out = tmp_path / "eval"
    rc = main(
        [
            "evaluate",
            "--predictions",
            f"agent={preds}",
            "--truth",
            str(truth),
            "--metrics",
            "accuracy,macro_f1",
            "--out",
            str(out),
            "--bootstrap",
            "200",
        ]
    )
    assert rc == 0
    with open(out / "metrics.csv") as fh:
        table = list(csv.DictReader(fh))
    by_metric = {row["metric"]: row for row in table}
    assert float(by_metric["accuracy"]["estimate"]) == pytest.approx(4 / 6)
    assert by_metric["accuracy"]["ci_low"] != ""
    assert by_metric["accuracy"]["ci_high"] != ""
    # Cross-check macro F1 against the metrics module on the same fixture.
    from pathnav.metrics import macro_f1

    want = macro_f1(
        [r["predicted"] for r in rows], [r["ground_truth"] for r in rows], ("A", "B")
    )
    assert float(by_metric["macro_f1"]["estimate"]) == pytest.approx(want)


def test_evaluate_survival_three_groups(tmp_path):
    rng = np.random.default_rng(3)
    preds = tmp_path / "preds.jsonl"
    truth = tmp_path / "truth.tsv"
    rows = []
    truth_lines = []
    for i in range(60):
        group = i % 3
        months = float(rng.exponential(15 + 25 * group) + 1)
        rows.append({"case_id": f"c{i}", "predicted": group})
        truth_lines.append(f"c{i}\t{months:.2f}\t1")
    preds.write_text("\n".join(json.dumps(r) for r in rows))
    truth.write_text("\n".join(truth_lines))
    out = tmp_path / "eval"
    rc = main(
        [
            "evaluate",
            "--predictions",
            f"agent={preds}",
            "--truth",
            str(truth),
            "--metrics",
            "survival",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    with open(out / "metrics.csv") as fh:
        table = list(csv.DictReader(fh))
    row = next(r for r in table if r["metric"].startswith("logrank_chi2"))
    assert row["metric"] == "logrank_chi2[df=2]"
    assert row["p_value"] != ""
    km_files = sorted(out.glob("km_agent_g*.csv"))
    assert len(km_files) == 3
    with open(km_files[0]) as fh:
        km_rows = list(csv.DictReader(fh))
    surv = [float(r["survival"]) for r in km_rows]
    assert all(b <= a + 1e-12 for a, b in zip(surv, surv[1:]))


def test_evaluate_empty_predictions_errors(tmp_path):
    preds = tmp_path / "empty.jsonl"
    preds.write_text("")
    truth = tmp_path / "truth.tsv"
    truth.write_text("c0\tA\n")
    rc = main(
        [
            "evaluate",
            "--predictions",
            f"agent={preds}",
            "--truth",
            str(truth),
            "--metrics",
            "accuracy",
            "--out",
            str(tmp_path / "eval"),
        ]
    )
    assert rc == 2


def test_evaluate_unmatched_ids_error(tmp_path):
    preds = tmp_path / "preds.jsonl"
    preds.write_text(json.dumps({"case_id": "mystery", "predicted": "A", "ground_truth": "A"}))
    truth = tmp_path / "truth.tsv"
    truth.write_text("c0\tA\n")
    rc = main(
        [
            "evaluate",
            "--predictions",
            f"agent={preds}",
            "--truth",
            str(truth),
            "--metrics",
            "accuracy",
            "--out",
            str(tmp_path / "eval"),
        ]
    )
    assert rc == 2


def test_evaluate_paired_compare(tmp_path):
    rows_a, rows_b, truth_lines = [], [], []
    rng = np.random.default_rng(1)
    for i in range(30):
        y = "A" if i % 2 else "B"
        rows_a.append({"case_id": f"c{i}", "predicted": y, "ground_truth": y})
        wrong = "B" if y == "A" else "A"
        rows_b.append(
            {
                "case_id": f"c{i}",
                "predicted": y if rng.random() < 0.4 else wrong,
                "ground_truth": y,
            }
        )
        truth_lines.append(f"c{i}\t{y}")
    pa = tmp_path / "a.jsonl"
    pb = tmp_path / "b.jsonl"
    pa.write_text("\n".join(json.dumps(r) for r in rows_a))
    pb.write_text("\n".join(json.dumps(r) for r in rows_b))
    truth = tmp_path / "truth.tsv"
    truth.write_text("\n".join(truth_lines))
    out = tmp_path / "eval"
    rc = main(
        [
            "evaluate",
            "--predictions",
            f"agent={pa}",
            "--predictions",
            f"single={pb}",
            "--truth",
            str(truth),
            "--metrics",
            "accuracy",
            "--out",
            str(out),
            "--compare",
            "agent,single",
            "--bootstrap",
            "100",
        ]
    )
    assert rc == 0
    with open(out / "metrics.csv") as fh:
        table = list(csv.DictReader(fh))
    row = next(r for r in table if r["metric"].startswith("paired_t"))
    assert float(row["p_value"]) < 0.05


def test_cache_inspect_and_freeze(tmp_path, capsys):
    from pathnav.chat import ResponseCache

    cache_path = tmp_path / "cache.jsonl"
    cache = ResponseCache(cache_path)
    cache.append("abc", "hello")
    assert main(["cache", "inspect", "--cache", str(cache_path)]) == 0
    out = capsys.readouterr().out
    assert "records: 1" in out
    assert main(["cache", "freeze", "--cache", str(cache_path)]) == 0
    cache2 = ResponseCache(cache_path)
    assert cache2.frozen
