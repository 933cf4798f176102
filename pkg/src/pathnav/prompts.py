"""Prompt construction for the navigation policy.

The system message fixes the output grammar (one-sentence reasoning, then a
`<<x=..., y=..., level=...>>` line, or the literal token TERMINATE); the
per-round user message carries the task, the candidate list in proposal
rounds, and a summary of regions already visited. Images ride alongside the
text: the slide overview first, then prior ROI patches in visit order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FORMAT_LINE = "<<x=..., y=..., level=...>>"

_SYSTEM_TEMPLATE = """Find a {size}px x {size}px region of interest (ROI) on the whole slide image (WSI) based on the user's query. Select the most relevant ROI by giving its {anchor_phrase} coordinate (x, y) and a downsample level. Both coordinates are normalized to the range 0 to 1, with (0, 0) at the top-left corner of the WSI and (1, 1) at the bottom-right{anchor_example}.

Adjust the downsample level to zoom in or out:
- Zoom in for more detail with a lower level (e.g., level=0 for highest magnification).
- Zoom out to cover a larger area with a higher level (e.g., level=1 or above).

The maximum downsample level of this WSI is {max_level}. An overview of the WSI with previously explored regions outlined by numbered boxes will be shown, together with the previously extracted ROI images.

Assess whether the regions examined so far meet the user's needs. If they do, respond with "TERMINATE". If not, suggest a new ROI.

To check different areas, adjust the coordinates. For example:
- To check the area to the left of the current location (x=0.5, y=0.5), use (x=0.4, y=0.5).
- To check the area below it, use (x=0.5, y=0.6).

Ensure to check multiple areas in the slide to find the best region of interest.

In each response, provide a brief medical reasoning (one sentence) explaining why the selected region is appropriate. Describe any notable cellular or structural features that support your decision.

End your response using the following two-line format:

"This region displays dense nuclear atypia and irregular gland formation, consistent with carcinoma."
<<x=0.43, y=0.62, level=0>>

Make sure the coordinate format exactly matches {format_line} for automatic parsing."""

_REMINDER = (
    "\n\nReminder: end your response with a single line exactly matching "
    f"{FORMAT_LINE} (values filled in, x and y in [0, 1], level a valid "
    "integer), or the single word TERMINATE."
)


def build_system_prompt(roi_size: int = 1024, max_level: int = 4, anchor: str = "center") -> str:
    """System message with the ROI size, level bound, and anchor semantics filled in.

    `anchor` is "center" (default) or "corner"; the latter keeps the
    historical top-left wording for prompt-fidelity experiments.
    """
    if anchor == "center":
        phrase = "center"
        example = ". For example, x=0.5, y=0.5 represents the center of the WSI"
    elif anchor == "corner":
        phrase = "top-left corner"
        example = ""
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    return _SYSTEM_TEMPLATE.format(
        size=roi_size,
        anchor_phrase=phrase,
        anchor_example=example,
        max_level=max_level,
        format_line=FORMAT_LINE,
    )


def format_reminder() -> str:
    return _REMINDER


@dataclass
class PromptBundle:
    """One request to the policy model: text plus ordered images."""

    system_text: str
    user_text: str
    images: list[np.ndarray] = field(default_factory=list)


def build_round_prompt(view, task: str) -> PromptBundle:
    """User message for one navigation round.

    Candidate coordinates (present only in proposal rounds) are printed to 4
    decimals and the policy is told to pick from the list; later rounds ask
    for free coordinates. Images are ordered overview first, then prior ROI
    patches in visit order.
    """
    lines = [f"Task: {task}", "", f"This is exploration round {view.round}."]
    if view.prior:
        lines.append(f"You have already examined {len(view.prior)} region(s):")
        for rec in view.prior:
            c = rec.region.center
            lines.append(
                f"  Round {rec.round}: (x={c.x:.4f}, y={c.y:.4f}, "
                f"level={rec.region.level}) - {rec.justification}"
            )
    if view.candidates is not None:
        lines.append("")
        lines.append(
            "Choose the next region from the following candidate coordinates:"
        )
        for i, p in enumerate(view.candidates, start=1):
            lines.append(f"  {i}. (x={p.x:.4f}, y={p.y:.4f})")
        lines.append("Select exactly one coordinate from the list above.")
    else:
        lines.append("")
        lines.append(
            "Propose the next region as free coordinates anywhere on the "
            "slide, or respond with TERMINATE if the evidence gathered is "
            "sufficient to answer the task."
        )
    images = [view.thumbnail] + [rec.patch for rec in view.prior]
    return PromptBundle(
        system_text=build_system_prompt(view.roi_size, view.max_level, view.anchor),
        user_text="\n".join(lines),
        images=images,
    )
