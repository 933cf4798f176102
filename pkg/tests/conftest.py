"""Shared fixtures: session-scoped synthetic slides so tests stay fast."""

import numpy as np
import pytest

from pathnav.slide import ArraySlide, build_levels
from pathnav.synthetic import (
    EllipseSpec,
    LesionSpec,
    SyntheticSlideSpec,
    generate_synthetic_slide,
)


def small_spec(seed=11):
    """2048x1536 slide, one 30%-area blob, one textured lesion inside it."""
    return SyntheticSlideSpec(
        seed=seed,
        width=2048,
        height=1536,
        blobs=[EllipseSpec(cx=0.48, cy=0.5, rx=0.36, ry=0.2653)],
        lesions=[
            LesionSpec(rect=(0.42, 0.44, 0.54, 0.56), label="A", texture_id=0)
        ],
        label_set=("A", "B", "C"),
    )


@pytest.fixture(scope="session")
def slide_spec():
    return small_spec()


@pytest.fixture(scope="session")
def slide_file(tmp_path_factory, slide_spec):
    path = tmp_path_factory.mktemp("slides") / "small.pyr"
    slide = generate_synthetic_slide(slide_spec, path)
    yield slide
    slide.close()


@pytest.fixture(scope="session")
def big_slide(tmp_path_factory):
    spec = SyntheticSlideSpec(
        seed=3,
        width=65536,
        height=49152,
        blobs=[EllipseSpec(cx=0.3, cy=0.4, rx=0.02, ry=0.018)],
        lesions=[
            LesionSpec(rect=(0.295, 0.395, 0.305, 0.405), label="A", texture_id=1)
        ],
        label_set=("A",),
    )
    path = tmp_path_factory.mktemp("big") / "big.pyr"
    slide = generate_synthetic_slide(spec, path)
    yield slide, spec
    slide.close()


@pytest.fixture()
def flat_slide():
    """Uniformly tinted in-memory slide (full foreground)."""
    level0 = np.full((512, 640, 3), (200, 150, 160), dtype=np.uint8)
    return ArraySlide(build_levels(level0, 5), slide_id="tinted")


@pytest.fixture()
def white_slide():
    level0 = np.full((512, 640, 3), 255, dtype=np.uint8)
    return ArraySlide(build_levels(level0, 5), slide_id="white")
