"""Downstream task runners: subtyping, VQA, report generation, checklist
extraction, and survival risk prediction.

Each runner assembles its task prompt around the evidence patches, sends one
request through the shared chat-client interface, and enforces the task's
closed answer set (trim/case-fold/strip-punctuation normalization, one retry
with a corrective reminder, then a hard error). Task definitions load from
plain-text files; see the loaders at the bottom.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from pathnav.errors import TaskError
from pathnav.prompts import PromptBundle

TASK_KINDS = ("subtyping", "report", "vqa", "checklist", "survival")


@dataclass
class VqaQuestion:
    text: str
    options: tuple[str, ...]
    answer: str | None = None


@dataclass
class ChecklistItem:
    question: str
    options: tuple[str, ...]
    reference: str | None = None


@dataclass
class PredictionRecord:
    """One case-level prediction with its provenance.

    `predicted` must come from the task's admissible set (free text only for
    report generation); `evidence` lists the patch references the prediction
    was made from; `raw_response` keeps the unparsed model reply.
    """

    case_id: str
    predicted: object
    ground_truth: object = ""
    evidence: list[str] = field(default_factory=list)
    raw_response: str = ""
    member: int | None = None
    category: str | None = None
    score: float | None = None
    case_accuracy: float | None = None

    def to_json(self) -> dict:
        out = {
            "case_id": self.case_id,
            "predicted": self.predicted,
            "ground_truth": self.ground_truth,
            "evidence": self.evidence,
            "raw_response": self.raw_response,
        }
        for key in ("member", "category", "score", "case_accuracy"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass
class TaskSpec:
    """One downstream task: its kind plus the content that parameterizes it."""

    kind: str
    cancer_type: str = ""
    label_set: list[tuple[str, str]] = field(default_factory=list)
    questions: list[VqaQuestion] = field(default_factory=list)
    checklist: list[ChecklistItem] = field(default_factory=list)
    report_exemplars: list[str] = field(default_factory=list)
    risk_exemplars: list[tuple[np.ndarray, int]] = field(default_factory=list)

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.kind == "subtyping" and len(self.label_set) < 2:
            raise TaskError("subtyping needs at least two labels")
        if self.kind == "report" and len(self.report_exemplars) != 5:
            raise TaskError("report generation needs exactly 5 exemplar reports")
        if self.kind == "survival" and len(self.risk_exemplars) != 3:
            raise TaskError("risk prediction needs exactly 3 exemplar pairs")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.label_set)


def normalize_answer(text: str) -> str:
    """Trim, case-fold, and strip wrapping quotes/trailing punctuation."""
    out = text.strip().strip("\"'").strip()
    out = out.rstrip(".,;:!").strip()
    return out.casefold()


def _ask_with_retry(client, bundle: PromptBundle, parse, reminder: str):
    """One request; on a parse failure, one retry with the reminder appended."""
    reply = client.complete_bundle(bundle)
    try:
        return parse(reply)
    except TaskError:
        retry = PromptBundle(
            system_text=bundle.system_text,
            user_text=bundle.user_text + "\n\n" + reminder,
            images=bundle.images,
        )
        return parse(client.complete_bundle(retry))


# ------------------------------------------------------------- subtype task

_SUBTYPE_TEMPLATE = """You are provided {num_images} histological slides from a tissue biopsy. Each slide highlights a specific region of interest (ROI) containing key cellular structures. Your task is to classify the slides into one of the following subtypes: {names}.

Use the detailed histological features below to guide your decision-making:

{descriptions}

Analyze all {num_images} slides provided and determine the most likely subtype based on the consistency of features observed across the regions. Considering these characteristics, provide only the classification word - e.g., {example_pair} - without any additional text or explanation. You have to make a decision even though you are unsure."""


def build_subtype_prompt(evidence: list[np.ndarray], spec: TaskSpec) -> PromptBundle:
    names = ", ".join(spec.labels)
    example_pair = " or ".join(f"'{n}'" for n in spec.labels[:2])
    descriptions = "\n\n".join(f"{name}: {desc}" for name, desc in spec.label_set)
    text = _SUBTYPE_TEMPLATE.format(
        num_images=len(evidence),
        names=names,
        example_pair=example_pair,
        descriptions=descriptions,
    )
    return PromptBundle(system_text="", user_text=text, images=list(evidence))


def predict_subtype(evidence: list[np.ndarray], spec: TaskSpec, client) -> str:
    """Exactly one label from the task's set, normalization-tolerant."""
    if spec.kind != "subtyping":
        raise TaskError(f"predict_subtype got a {spec.kind!r} spec")
    if not evidence:
        raise TaskError("subtyping needs at least one evidence patch")
    spec.validate()
    by_norm = {normalize_answer(name): name for name in spec.labels}

    def parse(reply: str) -> str:
        key = normalize_answer(reply)
        if key not in by_norm:
            raise TaskError(f"reply {reply!r} is not one of {spec.labels}")
        return by_norm[key]

    bundle = build_subtype_prompt(evidence, spec)
    reminder = f"Reply with exactly one word from: {', '.join(spec.labels)}."
    return _ask_with_retry(client, bundle, parse, reminder)


# ----------------------------------------------------------------- VQA task

_VQA_TEMPLATE = """You are a medical AI assistant trained to analyze pathology slides and answer multiple-choice questions related to cancer diagnosis. You are provided {num_images} histological slides from a tissue biopsy. Each slide highlights a specific region of interest (ROI) containing key cellular structures. For each question, select the most appropriate answer from the given choices. If you are uncertain, select the answer that is the closest match based on available information. Your response must strictly follow the order of the questions, and answers should be separated by a comma. Do not provide any explanations or additional information.

{questions_block}

Analyze all {num_images} slides provided and determine the most likely answer for each question.

Answers:"""


def build_vqa_prompt(evidence: list[np.ndarray], spec: TaskSpec) -> PromptBundle:
    blocks = []
    for i, q in enumerate(spec.questions, start=1):
        blocks.append(f"{i}. {q.text}\n   Choices: " + " | ".join(q.options))
    text = _VQA_TEMPLATE.format(
        num_images=len(evidence), questions_block="\n".join(blocks)
    )
    return PromptBundle(system_text="", user_text=text, images=list(evidence))


def segment_answers(reply: str, questions: list[VqaQuestion]) -> list[str] | None:
    """Split a comma-separated answer list against each question's options.

    Options may themselves contain commas, so segmentation is greedy with the
    longest option first: at each position the longest case-insensitive
    option match for the current question wins. Returns None when any
    question cannot be matched or text remains afterwards.
    """
    cf = reply.casefold()
    pos = 0
    out = []
    for q in questions:
        while pos < len(cf) and cf[pos] in " \t\n,":
            pos += 1
        matched = None
        for opt in sorted(q.options, key=len, reverse=True):
            if cf.startswith(opt.casefold(), pos):
                matched = opt
                break
        if matched is None:
            return None
        out.append(matched)
        pos += len(matched)
    if cf[pos:].strip(" \t\n,.") != "":
        return None
    return out


def answer_vqa(evidence: list[np.ndarray], spec: TaskSpec, client) -> list[str]:
    """One batched request answering every question with an exact option."""
    if spec.kind != "vqa":
        raise TaskError(f"answer_vqa got a {spec.kind!r} spec")
    if not spec.questions:
        raise TaskError("no questions to answer")

    def parse(reply: str) -> list[str]:
        answers = segment_answers(reply, spec.questions)
        if answers is None:
            raise TaskError(
                f"could not segment {len(spec.questions)} comma-separated "
                f"answers out of {reply!r}"
            )
        return answers

    bundle = build_vqa_prompt(evidence, spec)
    reminder = (
        f"Reply with exactly {len(spec.questions)} answers separated by "
        "commas, each copied verbatim from that question's choices."
    )
    return _ask_with_retry(client, bundle, parse, reminder)


# ------------------------------------------------------ question categorizer

# First matching category wins, in this order. Short staging codes match as
# whole words so e.g. "receptor" does not trip the "pt" rule.
CATEGORY_ORDER = (
    "diagnosis",
    "staging",
    "grading/proliferation",
    "structure",
    "margins",
    "biomarkers",
    "lymph-nodes",
    "size/multiplicity",
)

_CATEGORY_KEYWORDS: dict[str, tuple[str, ...]] = {
    "diagnosis": ("subtype", "carcinoma", "diagnosis", "histologic type", "histological type"),
    "staging": ("stage", "staging", r"\bpt\b", r"\bpn\b", "tnm", "metasta"),
    "grading/proliferation": (
        "grade",
        "grading",
        "mitot",
        "prolif",
        "ki-67",
        "ki67",
        "nottingham",
    ),
    "structure": ("architecture", "gland", "pattern", "stroma", "necrosis"),
    "margins": ("margin",),
    "biomarkers": (
        "her2",
        "estrogen",
        "progesterone",
        "receptor",
        "ihc",
        "immunohistochem",
        "biomarker",
    ),
    "lymph-nodes": ("node", "axillary", "sentinel"),
    "size/multiplicity": ("size", r"\bcm\b", "multifocal", "multiplicity", "diameter"),
}

_CATEGORY_RES = {
    cat: [
        re.compile(kw if kw.startswith("\\b") or "\\b" in kw else re.escape(kw))
        for kw in kws
    ]
    for cat, kws in _CATEGORY_KEYWORDS.items()
}


def categorize_question(text: str) -> str:
    """Keyword-table category for a question; falls through to "other"."""
    cf = text.casefold()
    for cat in CATEGORY_ORDER:
        for rx in _CATEGORY_RES[cat]:
            if rx.search(cf):
                return cat
    return "other"


# --------------------------------------------------------------- report task

_REPORT_TEMPLATE = """Generate a comprehensive pathology report for a patient diagnosed with {cancer_type}. This report should be professional, medically accurate, and well-structured. You are provided with some real-world pathology reports as reference. These examples are meant to offer insights into the type of information that might be included in such reports, but you do NOT need to follow their format or structure exactly. Instead, generate a report using your own medical knowledge, ensuring it is detailed, logical, and clinically relevant. Here are some pathology report examples for reference:

{examples}

Now, based on your medical expertise, generate a detailed pathology report for a patient with the same cancer type. Make sure your report is structured professionally, with accurate clinical descriptions and findings."""


def build_report_prompt(evidence: list[np.ndarray], spec: TaskSpec) -> PromptBundle:
    examples = "\n\n".join(
        f"[Example {i}]\n{text}" for i, text in enumerate(spec.report_exemplars, start=1)
    )
    text = _REPORT_TEMPLATE.format(cancer_type=spec.cancer_type, examples=examples)
    return PromptBundle(system_text="", user_text=text, images=list(evidence))


def generate_report(evidence: list[np.ndarray], spec: TaskSpec, client) -> str:
    """Model text verbatim; an empty reply is an error."""
    if spec.kind != "report":
        raise TaskError(f"generate_report got a {spec.kind!r} spec")
    spec.validate()
    reply = client.complete_bundle(build_report_prompt(evidence, spec))
    if not reply.strip():
        raise TaskError("empty report from the model")
    return reply


# ------------------------------------------------------------ checklist task

_CHECKLIST_SYSTEM = (
    "You are an expert pathologist extracting structured attributes from "
    "pathology reports. Answer strictly from the report text."
)

_CHECKLIST_ITEM_TEMPLATE = """Report:
\"\"\"
{report}
\"\"\"

Question: {question}
Options: {options}

Select exactly one option from the list above. Reply with the option text only."""


def extract_checklist(report: str, items: list[ChecklistItem], client) -> list[str]:
    """Deterministic per-item extraction constrained to each option list.

    Run once on a generated report and once on its reference to get the two
    option vectors the two-stage accuracy compares.
    """
    if not items:
        raise TaskError("checklist needs at least one item")
    out = []
    for item in items:
        by_norm = {normalize_answer(o): o for o in item.options}

        def parse(reply: str, _by_norm=by_norm, _item=item) -> str:
            key = normalize_answer(reply)
            if key not in _by_norm:
                raise TaskError(
                    f"reply {reply!r} not among options {_item.options}"
                )
            return _by_norm[key]

        bundle = PromptBundle(
            system_text=_CHECKLIST_SYSTEM,
            user_text=_CHECKLIST_ITEM_TEMPLATE.format(
                report=report,
                question=item.question,
                options=" | ".join(item.options),
            ),
        )
        reminder = "Reply with one option copied verbatim from the list."
        out.append(_ask_with_retry(client, bundle, parse, reminder))
    return out


# ----------------------------------------------------------------- risk task

_RISK_TEMPLATE = """You are an expert pathologist specializing in histological image analysis. Your task is to predict the risk level (0, 1, or 2) for a patient based on several provided regions of interest (ROI) from a histopathology slide.

The risk levels are defined as follows:
- 0 = Low risk (long survival time, e.g., > 36 months)
- 1 = Medium risk (moderate survival time, e.g., 12-36 months)
- 2 = High risk (short survival time, e.g., < 12 months)

Instruction:
1. The first 3 images are example ROI images with known risk levels.
2. The remaining images are new ROI images from a patient with {cancer_type} cancer. Your task is to analyze all remaining ROIs and assign a risk level (0, 1, or 2) for this slide.
3. Return only a SINGLE predicted risk level for all remaining images (except the first three images). For example: 1
4. ONLY return a SINGLE number from 0, 1, and 2, even though you are not sure. Do NOT include ANY other information in the response!

Few-shot Example Risk Levels:

Example 1: Risk Level = {r1}
Example 2: Risk Level = {r2}
Example 3: Risk Level = {r3}

Now analyze the remaining images (Starts at the fourth image) and return only the predicted risk level."""


def parse_risk_level(reply: str) -> int:
    """First character from {0, 1, 2} in the reply (lenient digit scan)."""
    for ch in reply:
        if ch in "012":
            return int(ch)
    raise TaskError(f"no risk level in {{0, 1, 2}} found in reply {reply!r}")


def predict_risk(evidence: list[np.ndarray], spec: TaskSpec, client) -> int:
    """Ordinal risk level from exemplar-conditioned prediction."""
    if spec.kind != "survival":
        raise TaskError(f"predict_risk got a {spec.kind!r} spec")
    spec.validate()
    if not evidence:
        raise TaskError("risk prediction needs at least one evidence patch")
    exemplar_patches = [p for p, _ in spec.risk_exemplars]
    r1, r2, r3 = (r for _, r in spec.risk_exemplars)
    text = _RISK_TEMPLATE.format(cancer_type=spec.cancer_type, r1=r1, r2=r2, r3=r3)
    bundle = PromptBundle(
        system_text="",
        user_text=text,
        images=exemplar_patches + list(evidence),
    )
    reminder = "Reply with a single character: 0, 1, or 2."
    return _ask_with_retry(client, bundle, parse_risk_level, reminder)


def risk_from_survival_months(months: float, event: bool) -> int | None:
    """Ground-truth ordinal risk from follow-up months.

    Observed events: < 12 months is high (2), 12-36 inclusive is medium (1),
    > 36 is low (0). Censored cases with months <= 36 cannot be labeled
    (insufficient follow-up) and return None; censored beyond 36 months are
    low risk.
    """
    if months < 0:
        raise TaskError("negative survival months")
    if not event:
        return 0 if months > 36 else None
    if months < 12:
        return 2
    if months <= 36:
        return 1
    return 0


# ----------------------------------------------------- navigation query text

NAV_QUERIES = {
    "subtyping": "What is the cancer subtype of this slide? Is it {options}?",
    "report": (
        "Generate a concise pathology report for this {cancer_type} cancer "
        "slide. Select an ROI that best captures diagnostic features such as "
        "tumor architecture, cellular morphology, and relevant markers."
    ),
    "survival": (
        "What is the survival risk level for this {cancer_type} cancer image? "
        "Select from the following options: Low (>36 months), Intermediate "
        "(12-36 months), or High (<12 months)."
    ),
}


def navigation_query(spec: TaskSpec) -> str:
    """The task text shown to the navigation policy for this task."""
    if spec.kind == "subtyping":
        options = " or ".join(spec.labels)
        return NAV_QUERIES["subtyping"].format(options=options)
    if spec.kind in ("report", "checklist"):
        return NAV_QUERIES["report"].format(cancer_type=spec.cancer_type)
    if spec.kind == "survival":
        return NAV_QUERIES["survival"].format(cancer_type=spec.cancer_type)
    if spec.kind == "vqa":
        heads = "; ".join(q.text for q in spec.questions[:3])
        return f"Find the region best suited to answer: {heads}"
    raise TaskError(f"unknown task kind {spec.kind!r}")


# -------------------------------------------------------------- file loaders


def load_label_sets(path=None) -> dict[str, list[tuple[str, str]]]:
    """Parse the grouped label/description file.

    Format: `group: NAME` starts a group, `label: NAME` starts a label, and
    following lines up to the next directive are that label's description.
    Defaults to the bundled description file.
    """
    if path is None:
        text = (
            resources.files("pathnav").joinpath("data/subtype_descriptions.txt")
        ).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    groups: dict[str, list[tuple[str, str]]] = {}
    group = None
    label = None
    buf: list[str] = []

    def flush():
        nonlocal label, buf
        if group is not None and label is not None:
            groups[group].append((label, " ".join(buf).strip()))
        label = None
        buf = []

    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("group:"):
            flush()
            group = stripped.split(":", 1)[1].strip()
            groups[group] = []
        elif stripped.startswith("label:"):
            flush()
            label = stripped.split(":", 1)[1].strip()
        elif stripped:
            buf.append(stripped)
    flush()
    return groups


def load_vqa_questions(path) -> list[VqaQuestion]:
    """TSV: question <tab> pipe-separated options <tab> answer."""
    out = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TaskError(f"{path}:{ln}: expected 3 tab-separated fields")
        question, opts, answer = parts
        options = tuple(o.strip() for o in opts.split("|") if o.strip())
        if answer.strip() not in options:
            raise TaskError(f"{path}:{ln}: answer {answer!r} not among options")
        out.append(VqaQuestion(text=question.strip(), options=options, answer=answer.strip()))
    return out


def load_checklist(path) -> list[ChecklistItem]:
    """TSV: question <tab> pipe-separated options <tab> reference answer."""
    out = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TaskError(f"{path}:{ln}: expected 3 tab-separated fields")
        question, opts, ref = parts
        options = tuple(o.strip() for o in opts.split("|") if o.strip())
        if ref.strip() not in options:
            raise TaskError(f"{path}:{ln}: reference {ref!r} not among options")
        out.append(ChecklistItem(question=question.strip(), options=options, reference=ref.strip()))
    return out


def load_survival_table(path) -> list[tuple[str, float, bool]]:
    """TSV: case id <tab> months <tab> event flag (1 = death observed)."""
    out = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TaskError(f"{path}:{ln}: expected 3 tab-separated fields")
        case_id, months, event = parts
        out.append((case_id.strip(), float(months), event.strip() in ("1", "true", "True")))
    return out
