"""Synthetic pyramid slides with planted, machine-readable ground truth.

A synthetic slide is a white background, one or more elliptical tissue blobs
with a gentle low-frequency mottle, and rectangular lesions carrying
class-distinct procedural textures. Lesions must lie inside a tissue blob.
Alongside the PYR1 container the generator writes a plain-text sidecar with
one record per lesion, which oracle policies and acceptance checks read back.

Rendering happens once at level 0 (banded, per blob bounding box); every
other level is produced by exact 2x2 block averaging of the previous one, so
pyramid consistency holds by construction. Texture patterns are functions of
absolute level-0 pixel coordinates and the texture id only, which keeps a
class's appearance consistent across slides generated with different seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pathnav.errors import SpecValidationError
from pathnav.rng import substream
from pathnav.slide import (
    FileSlide,
    TILE,
    downsample_2x,
    open_slide,
    write_pyramid,
)

BACKGROUND = np.array([246, 246, 244], dtype=np.uint8)
TISSUE_BASE = np.array([233, 200, 210], dtype=np.float32)

# Lesion palette: dark/base pairs, all with saturation well above the tissue
# mask threshold so planted lesions always sit inside the foreground.
LESION_PALETTE = [
    (np.array([96, 56, 92], np.float32), np.array([178, 118, 168], np.float32)),
    (np.array([112, 62, 58], np.float32), np.array([198, 128, 120], np.float32)),
    (np.array([58, 76, 112], np.float32), np.array([126, 148, 190], np.float32)),
    (np.array([92, 100, 52], np.float32), np.array([162, 170, 112], np.float32)),
    (np.array([120, 70, 104], np.float32), np.array([206, 144, 182], np.float32)),
]

# Declared separation margin for lesion textures: mean gradient magnitude
# inside a lesion is at least this many intensity units, and at least three
# times the plain-tissue value. Tests assert it after generation.
TEXTURE_GRADIENT_MARGIN = 8.0
TEXTURE_GRADIENT_RATIO = 3.0

RENDER_BAND_ROWS = 1024


@dataclass(frozen=True)
class EllipseSpec:
    """Tissue blob: center and radii in normalized slide coordinates."""

    cx: float
    cy: float
    rx: float
    ry: float

    def contains(self, x: float, y: float) -> bool:
        return ((x - self.cx) / self.rx) ** 2 + ((y - self.cy) / self.ry) ** 2 <= 1.0

    @property
    def area(self) -> float:
        return math.pi * self.rx * self.ry


@dataclass(frozen=True)
class LesionSpec:
    """Planted lesion: normalized rectangle, class label, texture id."""

    rect: tuple[float, float, float, float]  # x0, y0, x1, y1
    label: str
    texture_id: int


@dataclass
class SyntheticSlideSpec:
    seed: int
    width: int
    height: int
    blobs: list[EllipseSpec]
    lesions: list[LesionSpec] = field(default_factory=list)
    label_set: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.width < 2 * TILE or self.height < 2 * TILE:
            raise SpecValidationError("slide must be at least two tiles on each edge")
        for b in self.blobs:
            if not (0 < b.rx and 0 < b.ry):
                raise SpecValidationError("blob radii must be positive")
            if b.cx - b.rx < 0 or b.cx + b.rx > 1 or b.cy - b.ry < 0 or b.cy + b.ry > 1:
                raise SpecValidationError("blob extends outside the slide")
        for les in self.lesions:
            x0, y0, x1, y1 = les.rect
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise SpecValidationError(f"invalid lesion rect {les.rect}")
            if self.label_set and les.label not in self.label_set:
                raise SpecValidationError(
                    f"lesion label {les.label!r} not in declared set {self.label_set}"
                )
            corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
            if not any(
                all(b.contains(x, y) for x, y in corners) for b in self.blobs
            ):
                raise SpecValidationError(
                    f"lesion {les.rect} does not lie inside any tissue blob"
                )

    @property
    def level_count(self) -> int:
        long_edge = max(self.width, self.height)
        need = 1 + max(0, math.ceil(math.log2(long_edge / 2048)))
        return max(5, need)


def level_dims(width: int, height: int, level_count: int) -> list[tuple[int, int]]:
    return [(-(-width // 2 ** lv), -(-height // 2 ** lv)) for lv in range(level_count)]


def _texture_field(texture_id: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Blend weight in [0, 1] for the given texture at absolute level-0 pixels."""
    t = texture_id % 5
    if t == 0:
        return 0.5 + 0.5 * np.sin(2 * np.pi * ys / 16.0)
    if t == 1:
        return ((xs // 12).astype(np.int64) + (ys // 12).astype(np.int64)) % 2
    if t == 2:
        return (np.sin(2 * np.pi * xs / 18.0) * np.sin(2 * np.pi * ys / 18.0) > 0.25).astype(
            np.float32
        )
    if t == 3:
        return 0.5 + 0.5 * np.sin(2 * np.pi * (xs + ys) / 22.0)
    return 0.5 + 0.5 * np.sin(2 * np.pi * xs / 16.0)


class _BlobPatch:
    """One rendered blob region with its pyramid of downsampled copies."""

    def __init__(self, x0: int, y0: int, levels: list[np.ndarray]):
        self.x0 = x0
        self.y0 = y0
        self.levels = levels

    def rect_at(self, level: int) -> tuple[int, int, int, int]:
        arr = self.levels[level]
        x0 = self.x0 >> level
        y0 = self.y0 >> level
        return x0, y0, x0 + arr.shape[1], y0 + arr.shape[0]


def _render_blob_patch(
    spec: SyntheticSlideSpec, blob: EllipseSpec, phases: np.ndarray
) -> _BlobPatch:
    W, H = spec.width, spec.height
    align = 2 ** (spec.level_count - 1)
    margin = 8
    bx0 = max(0, (int((blob.cx - blob.rx) * W) - margin) // align * align)
    by0 = max(0, (int((blob.cy - blob.ry) * H) - margin) // align * align)
    bx1 = min(W, -(-(int((blob.cx + blob.rx) * W) + margin) // align) * align)
    by1 = min(H, -(-(int((blob.cy + blob.ry) * H) + margin) // align) * align)
    pw, ph = bx1 - bx0, by1 - by0
    patch = np.empty((ph, pw, 3), dtype=np.uint8)

    cxp, cyp = blob.cx * W, blob.cy * H
    rxp, ryp = blob.rx * W, blob.ry * H
    edge_gain = min(rxp, ryp) / 3.0

    lesions_here = [
        les
        for les in spec.lesions
        if all(
            blob.contains(x, y)
            for x, y in [
                (les.rect[0], les.rect[1]),
                (les.rect[2], les.rect[1]),
                (les.rect[0], les.rect[3]),
                (les.rect[2], les.rect[3]),
            ]
        )
    ]

    # All per-pixel fields are separable in x and y, so precompute 1-D terms
    # and let broadcasting do the 2-D work.
    xs = np.arange(bx0, bx1, dtype=np.float32) + 0.5
    qx2 = ((xs - cxp) / rxp) ** 2
    sx = np.sin(xs / 173.0 + phases[0])
    # sin((x + y)/409 + p) split via the angle-addition identity.
    sxa = np.sin(xs / 409.0 + phases[2])
    cxa = np.cos(xs / 409.0 + phases[2])

    for r0 in range(0, ph, RENDER_BAND_ROWS):
        r1 = min(ph, r0 + RENDER_BAND_ROWS)
        ys = np.arange(by0 + r0, by0 + r1, dtype=np.float32) + 0.5
        qy2 = (((ys - cyp) / ryp) ** 2)[:, None]
        cov = qx2[None, :] + qy2
        # cov = clip((1 - q) * gain + 0.5, 0, 1), computed in place.
        cov *= -edge_gain
        cov += edge_gain + 0.5
        np.clip(cov, 0.0, 1.0, out=cov)
        # Low-frequency multiplicative mottle keeps saturation roughly constant.
        sy = np.sin(ys / 211.0 + phases[1])[:, None]
        mottle = sx[None, :] * sy
        mottle += sxa[None, :] * np.cos(ys / 409.0)[:, None]
        mottle += cxa[None, :] * np.sin(ys / 409.0)[:, None]
        mottle *= 0.02 * cov
        mottle += cov
        # mottle now holds cov * (1 + 0.02 * mottle); bg takes the remainder.
        inv = 1.0 - cov
        band = np.empty((r1 - r0, pw, 3), dtype=np.float32)
        for c in range(3):
            ch = band[:, :, c]
            np.multiply(mottle, TISSUE_BASE[c], out=ch)
            ch += inv * np.float32(BACKGROUND[c])
        for les in lesions_here:
            lx0 = int(les.rect[0] * W) - bx0
            ly0 = int(les.rect[1] * H) - by0 - r0
            lx1 = int(les.rect[2] * W) - bx0
            ly1 = int(les.rect[3] * H) - by0 - r0
            ly0c, ly1c = max(0, ly0), min(r1 - r0, ly1)
            if ly0c >= ly1c:
                continue
            lx0c, lx1c = max(0, lx0), min(pw, lx1)
            gx = xs[None, lx0c:lx1c]
            gy = ys[ly0c:ly1c, None]
            t = _texture_field(les.texture_id, gx, gy).astype(np.float32)
            dark, base = LESION_PALETTE[les.texture_id % len(LESION_PALETTE)]
            for c in range(3):
                band[ly0c:ly1c, lx0c:lx1c, c] = dark[c] + t * (base[c] - dark[c])
        band += 0.5
        np.clip(band, 0, 255, out=band)
        patch[r0:r1] = band

    levels = [patch]
    for _ in range(spec.level_count - 1):
        levels.append(downsample_2x(levels[-1]))
    return _BlobPatch(bx0, by0, levels)


class _TileComposer:
    """Composites tiles from the background constant plus blob patches."""

    def __init__(self, spec: SyntheticSlideSpec, patches: list[_BlobPatch]):
        self.dims = level_dims(spec.width, spec.height, spec.level_count)
        self.patches = patches
        self._bg_cache: dict[tuple[int, int], np.ndarray] = {}

    def _background(self, th: int, tw: int) -> np.ndarray:
        key = (th, tw)
        tile = self._bg_cache.get(key)
        if tile is None:
            tile = np.broadcast_to(BACKGROUND, (th, tw, 3)).copy()
            self._bg_cache[key] = tile
        return tile

    def __call__(self, level: int, tx: int, ty: int):
        w, h = self.dims[level]
        x0, y0 = tx * TILE, ty * TILE
        tw = min(TILE, w - x0)
        th = min(TILE, h - y0)
        hits = []
        for p in self.patches:
            px0, py0, px1, py1 = p.rect_at(level)
            if px0 < x0 + tw and px1 > x0 and py0 < y0 + th and py1 > y0:
                hits.append((p, px0, py0, px1, py1))
        if not hits:
            return self._background(th, tw), ("bg", th, tw)
        tile = self._background(th, tw).copy()
        for p, px0, py0, px1, py1 in hits:
            ix0, iy0 = max(x0, px0), max(y0, py0)
            ix1, iy1 = min(x0 + tw, px1), min(y0 + th, py1)
            tile[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0] = p.levels[level][
                iy0 - py0 : iy1 - py0, ix0 - px0 : ix1 - px0
            ]
        return tile


def sidecar_path(slide_path) -> Path:
    return Path(slide_path).with_suffix(".truth")


def write_sidecar(path, lesions: list[LesionSpec]) -> None:
    lines = []
    for les in lesions:
        x0, y0, x1, y1 = les.rect
        lines.append(
            f"lesion {les.label} {x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f} {les.texture_id}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_sidecar(path) -> list[LesionSpec]:
    lesions = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "lesion" or len(parts) != 7:
            raise SpecValidationError(f"bad sidecar record: {line!r}")
        _, label, x0, y0, x1, y1, tex = parts
        lesions.append(
            LesionSpec(
                rect=(float(x0), float(y0), float(x1), float(y1)),
                label=label,
                texture_id=int(tex),
            )
        )
    return lesions


def generate_synthetic_slide(spec: SyntheticSlideSpec, out_path) -> FileSlide:
    """Render, write the PYR1 container plus ground-truth sidecar, and reopen.

    Byte-identical output for identical specs: rendering depends only on the
    spec (the seed drives the tissue mottle phases).
    """
    spec.validate()
    out_path = Path(out_path)
    rng = substream(spec.seed, "synthetic-mottle")
    phases = rng.uniform(0, 2 * np.pi, size=3)
    patches = [_render_blob_patch(spec, blob, phases) for blob in spec.blobs]
    composer = _TileComposer(spec, patches)
    write_pyramid(out_path, composer.dims, composer)
    write_sidecar(sidecar_path(out_path), spec.lesions)
    return open_slide(out_path)


def rect_overlap_fraction(
    a: tuple[float, float, float, float], b: tuple[float, float, float, float]
) -> float:
    """Intersection area over the smaller rectangle's area (0 when disjoint)."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    smaller = min(area_a, area_b)
    if smaller <= 0:
        return 0.0
    return ix * iy / smaller


def lesion_center(les: LesionSpec) -> tuple[float, float]:
    x0, y0, x1, y1 = les.rect
    return ((x0 + x1) / 2, (y0 + y1) / 2)


def check_pyramid_consistency(slide, max_abs_diff: int = 2) -> int:
    """Verify 2x2 averaging of each level reproduces the next one.

    Returns the worst per-channel absolute difference found. Intended for
    desk-scale slides (reads whole levels).
    """
    worst = 0
    for lv in range(slide.level_count - 1):
        lo = slide.read_level(lv)
        hi = slide.read_level(lv + 1)
        approx = downsample_2x(lo)
        diff = int(
            np.max(np.abs(approx.astype(np.int16) - hi.astype(np.int16)))
        )
        worst = max(worst, diff)
        if diff > max_abs_diff:
            raise AssertionError(
                f"pyramid inconsistency at level {lv}->{lv + 1}: max diff {diff}"
            )
    return worst


def random_slide_spec(
    seed: int,
    width: int = 6144,
    height: int = 4608,
    label: str = "A",
    label_set: tuple[str, ...] = ("A",),
    texture_id: int | None = None,
    tissue_area: float = 0.45,
    lesion_tissue_frac: float = 0.02,
) -> SyntheticSlideSpec:
    """One-blob, one-lesion spec with randomized placement.

    The blob covers `tissue_area` of the slide; the lesion is a pixel-square
    rectangle covering `lesion_tissue_frac` of the blob area, placed uniformly
    so that it lies fully inside the blob.
    """
    rng = substream(seed, "slide-spec")
    aspect = width / height
    r_area = tissue_area / math.pi
    # Split area between radii, keeping the ellipse roughly screen-shaped.
    rx = math.sqrt(r_area * min(1.25, aspect))
    ry = r_area / rx
    cx = rng.uniform(rx, 1 - rx)
    cy = rng.uniform(ry, 1 - ry)
    blob = EllipseSpec(cx=cx, cy=cy, rx=rx, ry=ry)

    lesion_area_norm = lesion_tissue_frac * blob.area
    edge_px = math.sqrt(lesion_area_norm * width * height)
    ex, ey = edge_px / width, edge_px / height
    for _ in range(10_000):
        lx = rng.uniform(cx - rx, cx + rx)
        ly = rng.uniform(cy - ry, cy + ry)
        if ((abs(lx - cx) + ex / 2) / rx) ** 2 + ((abs(ly - cy) + ey / 2) / ry) ** 2 <= 1:
            break
    else:
        raise SpecValidationError("could not place lesion inside blob")
    tex = texture_id if texture_id is not None else label_set.index(label)
    lesion = LesionSpec(
        rect=(lx - ex / 2, ly - ey / 2, lx + ex / 2, ly + ey / 2),
        label=label,
        texture_id=tex,
    )
    return SyntheticSlideSpec(
        seed=seed,
        width=width,
        height=height,
        blobs=[blob],
        lesions=[lesion],
        label_set=label_set,
    )
