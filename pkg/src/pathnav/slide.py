"""Pyramid slide abstraction and the PYR1 tiled container.

A slide is a multi-level image pyramid: level 0 is the highest resolution and
level L is downsampled by exactly 2**L (dimensions rounded up). Coordinates
exchanged with policies are normalized to [0, 1] x [0, 1] with (0, 0) the
top-left corner of the slide and (1, 1) the bottom-right.

The on-disk container is deliberately simple:

    magic "PYR1"
    level_count                     u32 LE
    per level: width, height        u32 LE each
    per level: tile directory       u64 LE offset per 256x256 tile, row-major
    tile data                       raw 8-bit RGB, row-major within the tile

Edge tiles are stored at their clipped size, so a tile's byte length is fully
determined by its grid position. Offsets may alias: identical tiles (e.g. the
blank background of a sparse slide) are stored once.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from pathnav.errors import DegenerateSlideError, RegionError, SlideFormatError

MAGIC = b"PYR1"
TILE = 256
MIN_LEVELS = 5

# Thumbnails come from level 3 when that level is small enough, level 4
# otherwise; rendered views are capped at this many pixels on the long edge.
THUMB_LEVEL_MAX_EDGE = 2048
DEFAULT_THUMB_EDGE = 1024

OVERLAY_COLOR = (0, 160, 255)


@dataclass(frozen=True)
class NormPoint:
    """A point in slide-normalized coordinates, both axes in [0, 1]."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"normalized point out of range: ({self.x}, {self.y})")

    def distance(self, other: "NormPoint") -> float:
        return float(np.hypot(self.x - other.x, self.y - other.y))


@dataclass(frozen=True)
class RegionSpec:
    """A square window on the slide: center point, pyramid level, edge in px."""

    center: NormPoint
    level: int
    size: int = 1024

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("region size must be positive")
        if self.level < 0:
            raise ValueError("region level must be non-negative")


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


class PyramidSlide:
    """Read interface over an image pyramid.

    Concrete slides are immutable after construction; reads are safe under
    concurrent readers.
    """

    slide_id: str
    level_count: int
    level_dimensions: list[tuple[int, int]]

    def downsample(self, level: int) -> int:
        return 2 ** level

    def read_region(self, level: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        raise NotImplementedError

    def read_level(self, level: int) -> np.ndarray:
        w, h = self.level_dimensions[level]
        return self.read_region(level, 0, 0, w, h)

    def _check_level(self, level: int) -> None:
        if not 0 <= level < self.level_count:
            raise RegionError(
                f"level {level} out of range for slide with {self.level_count} levels"
            )


class ArraySlide(PyramidSlide):
    """Pyramid held fully in memory; used by the generator and in tests."""

    def __init__(self, levels: list[np.ndarray], slide_id: str = "memory"):
        if len(levels) < 2:
            raise ValueError("need at least two pyramid levels")
        self.slide_id = slide_id
        self._levels = [np.ascontiguousarray(lv, dtype=np.uint8) for lv in levels]
        self.level_count = len(levels)
        self.level_dimensions = [(lv.shape[1], lv.shape[0]) for lv in self._levels]

    def read_region(self, level, x0, y0, w, h):
        self._check_level(level)
        lw, lh = self.level_dimensions[level]
        if x0 < 0 or y0 < 0 or x0 + w > lw or y0 + h > lh:
            raise RegionError(f"read window outside level {level} bounds")
        return self._levels[level][y0 : y0 + h, x0 : x0 + w].copy()


class FileSlide(PyramidSlide):
    """Lazy per-tile reader over a PYR1 container."""

    def __init__(self, path):
        path = Path(path)
        if not path.is_file():
            raise SlideFormatError(f"slide file not found: {path}")
        self.path = path
        self.slide_id = path.stem
        self._fh = open(path, "rb")
        self._lock = threading.Lock()
        self._tile_cache: dict[int, np.ndarray] = {}
        try:
            self._read_header()
        except SlideFormatError:
            self._fh.close()
            raise

    def _read_header(self):
        fh = self._fh
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise SlideFormatError(f"corrupt header (bad magic) in {self.path}")
        (count,) = struct.unpack("<I", head[4:8])
        if count < MIN_LEVELS:
            raise SlideFormatError(
                f"unsupported pyramid: {count} levels, need at least {MIN_LEVELS}"
            )
        raw = fh.read(8 * count)
        if len(raw) < 8 * count:
            raise SlideFormatError(f"corrupt header (truncated dims) in {self.path}")
        dims = [struct.unpack_from("<II", raw, 8 * i) for i in range(count)]
        w0, h0 = dims[0]
        for lvl, (w, h) in enumerate(dims):
            if w != -(-w0 // 2 ** lvl) or h != -(-h0 // 2 ** lvl):
                raise SlideFormatError(
                    f"corrupt header: level {lvl} dims {w}x{h} inconsistent with "
                    f"level 0 {w0}x{h0}"
                )
        self.level_count = count
        self.level_dimensions = [(int(w), int(h)) for w, h in dims]
        self._dirs = []
        for w, h in self.level_dimensions:
            n = self._tiles_x(w) * self._tiles_y(h)
            buf = fh.read(8 * n)
            if len(buf) < 8 * n:
                raise SlideFormatError(f"corrupt header (truncated directory) in {self.path}")
            self._dirs.append(np.frombuffer(buf, dtype="<u8"))
        self._data_start = fh.tell()
        self._file_size = self.path.stat().st_size
        for (w, h), offs in zip(self.level_dimensions, self._dirs):
            ntx, nty = self._tiles_x(w), self._tiles_y(h)
            tws = np.full(ntx, TILE, dtype=np.int64)
            tws[-1] = w - (ntx - 1) * TILE
            ths = np.full(nty, TILE, dtype=np.int64)
            ths[-1] = h - (nty - 1) * TILE
            ends = offs.astype(np.int64) + (ths[:, None] * tws[None, :] * 3).ravel()
            if offs.size and (
                int(offs.min()) < self._data_start or int(ends.max()) > self._file_size
            ):
                raise SlideFormatError(
                    f"corrupt or truncated tile data in {self.path}"
                )

    @staticmethod
    def _tiles_x(w: int) -> int:
        return -(-w // TILE)

    @staticmethod
    def _tiles_y(h: int) -> int:
        return -(-h // TILE)

    def _tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        w, h = self.level_dimensions[level]
        tw = min(TILE, w - tx * TILE)
        th = min(TILE, h - ty * TILE)
        off = int(self._dirs[level][ty * self._tiles_x(w) + tx])
        nbytes = tw * th * 3
        if off < self._data_start or off + nbytes > self._file_size:
            raise SlideFormatError(f"corrupt tile offset in {self.path}")
        cached = self._tile_cache.get(off)
        if cached is not None and cached.shape == (th, tw, 3):
            return cached
        with self._lock:
            self._fh.seek(off)
            buf = self._fh.read(nbytes)
        if len(buf) < nbytes:
            raise SlideFormatError(f"truncated tile data in {self.path}")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(th, tw, 3)
        if len(self._tile_cache) > 128:
            self._tile_cache.clear()
        self._tile_cache[off] = arr
        return arr

    def read_region(self, level, x0, y0, w, h):
        self._check_level(level)
        lw, lh = self.level_dimensions[level]
        if x0 < 0 or y0 < 0 or w <= 0 or h <= 0 or x0 + w > lw or y0 + h > lh:
            raise RegionError(f"read window outside level {level} bounds")
        out = np.empty((h, w, 3), dtype=np.uint8)
        for ty in range(y0 // TILE, -(-(y0 + h) // TILE)):
            for tx in range(x0 // TILE, -(-(x0 + w) // TILE)):
                tile = self._tile(level, tx, ty)
                sx0 = max(x0, tx * TILE)
                sy0 = max(y0, ty * TILE)
                sx1 = min(x0 + w, tx * TILE + tile.shape[1])
                sy1 = min(y0 + h, ty * TILE + tile.shape[0])
                out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = tile[
                    sy0 - ty * TILE : sy1 - ty * TILE, sx0 - tx * TILE : sx1 - tx * TILE
                ]
        return out

    def close(self):
        self._fh.close()


def open_slide(path) -> FileSlide:
    """Open a PYR1 container for lazy per-tile reads."""
    return FileSlide(path)


def write_pyramid(path, dims: list[tuple[int, int]], tile_provider) -> None:
    """Write a PYR1 container.

    `tile_provider(level, tx, ty)` must return the uint8 RGB array for that
    tile at its clipped size, or a `(array, token)` pair where `token` is a
    hashable tag identifying tiles known to be identical (sparse providers
    use this to skip re-hashing their constant background). Identical tiles
    are deduplicated by content hash and stored once.
    """
    path = Path(path)
    count = len(dims)
    header = bytearray(MAGIC)
    header += struct.pack("<I", count)
    for w, h in dims:
        header += struct.pack("<II", w, h)
    tile_counts = [FileSlide._tiles_x(w) * FileSlide._tiles_y(h) for w, h in dims]
    dirs_start = len(header)
    data_start = dirs_start + 8 * sum(tile_counts)

    seen: dict[bytes, int] = {}
    token_offsets: dict = {}
    dirs = [np.zeros(n, dtype="<u8") for n in tile_counts]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (data_start - dirs_start))
        pos = data_start
        for level, (w, h) in enumerate(dims):
            ntx = FileSlide._tiles_x(w)
            for ty in range(FileSlide._tiles_y(h)):
                for tx in range(ntx):
                    res = tile_provider(level, tx, ty)
                    arr, token = res if isinstance(res, tuple) else (res, None)
                    if token is not None and token in token_offsets:
                        dirs[level][ty * ntx + tx] = token_offsets[token]
                        continue
                    tw = min(TILE, w - tx * TILE)
                    th = min(TILE, h - ty * TILE)
                    if arr.shape != (th, tw, 3) or arr.dtype != np.uint8:
                        raise ValueError(
                            f"tile provider returned {arr.shape} {arr.dtype} for "
                            f"level {level} tile ({tx},{ty}), expected ({th},{tw},3) uint8"
                        )
                    blob = arr.tobytes()
                    digest = hashlib.blake2b(blob, digest_size=16).digest()
                    off = seen.get(digest)
                    if off is None:
                        fh.write(blob)
                        off = pos
                        pos += len(blob)
                        seen[digest] = off
                    if token is not None:
                        token_offsets[token] = off
                    dirs[level][ty * ntx + tx] = off
        fh.seek(dirs_start)
        for d in dirs:
            fh.write(d.tobytes())


def write_pyramid_from_arrays(path, levels: list[np.ndarray]) -> None:
    """Write a PYR1 container from fully materialized level arrays."""
    dims = [(lv.shape[1], lv.shape[0]) for lv in levels]

    def provider(level, tx, ty):
        lv = levels[level]
        return np.ascontiguousarray(
            lv[ty * TILE : (ty + 1) * TILE, tx * TILE : (tx + 1) * TILE]
        )

    write_pyramid(path, dims, provider)


def norm_to_pixel(slide: PyramidSlide, p: NormPoint, level: int) -> tuple[int, int]:
    """Map a normalized point to pixel coordinates at `level`.

    Rounds to the nearest pixel and clamps to [0, dim - 1], so (0, 0) is the
    top-left pixel and (1, 1) the bottom-right one.
    """
    slide._check_level(level)
    w, h = slide.level_dimensions[level]
    px = min(max(_round_half_up(p.x * w), 0), w - 1)
    py = min(max(_round_half_up(p.y * h), 0), h - 1)
    return px, py


def region_window(
    slide: PyramidSlide, r: RegionSpec, anchor: str = "center"
) -> tuple[int, int]:
    """Top-left pixel of the region's read window at its level.

    The window is shifted (never shrunk) to lie fully inside the level, so
    every extracted patch is exactly size x size real pixels. `anchor` is
    "center" (default) or "corner", the latter treating the point as the
    window's top-left corner.
    """
    slide._check_level(r.level)
    w, h = slide.level_dimensions[r.level]
    if r.size > w or r.size > h:
        raise RegionError(
            f"region size {r.size} exceeds level {r.level} dimensions {w}x{h}"
        )
    px, py = norm_to_pixel(slide, r.center, r.level)
    if anchor == "center":
        x0 = px - r.size // 2
        y0 = py - r.size // 2
    elif anchor == "corner":
        x0, y0 = px, py
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    x0 = min(max(x0, 0), w - r.size)
    y0 = min(max(y0, 0), h - r.size)
    return x0, y0


def extract_region(slide: PyramidSlide, r: RegionSpec, anchor: str = "center") -> np.ndarray:
    """Extract the size x size RGB patch for `r`, window shifted into bounds."""
    x0, y0 = region_window(slide, r, anchor=anchor)
    return slide.read_region(r.level, x0, y0, r.size, r.size)


def thumbnail_level(slide: PyramidSlide) -> int:
    """Level used for whole-slide views: 3 when small enough, else 4."""
    w3, h3 = slide.level_dimensions[3]
    return 3 if max(w3, h3) <= THUMB_LEVEL_MAX_EDGE else 4


def norm_footprint(slide: PyramidSlide, r: RegionSpec) -> tuple[float, float, float, float]:
    """The region's window extent in normalized slide coordinates (x0, y0, x1, y1)."""
    x0, y0 = region_window(slide, r)
    w, h = slide.level_dimensions[r.level]
    return (x0 / w, y0 / h, (x0 + r.size) / w, (y0 + r.size) / h)


def overlay_boxes(
    slide: PyramidSlide,
    thumb_w: int,
    thumb_h: int,
    overlays: list[RegionSpec],
) -> list[tuple[int, int, int, int]]:
    """Thumbnail-pixel rectangles for each overlay region, clipped to bounds.

    Box centers land where norm_to_pixel would put the region center on a
    raster of the thumbnail's dimensions; box extent is the window footprint
    scaled into thumbnail pixels.
    """
    w0, h0 = slide.level_dimensions[0]
    boxes = []
    for r in overlays:
        cx = min(max(_round_half_up(r.center.x * thumb_w), 0), thumb_w - 1)
        cy = min(max(_round_half_up(r.center.y * thumb_h), 0), thumb_h - 1)
        half_x = r.size * (2 ** r.level) / w0 * thumb_w / 2
        half_y = r.size * (2 ** r.level) / h0 * thumb_h / 2
        x0 = max(int(cx - half_x), 0)
        y0 = max(int(cy - half_y), 0)
        x1 = min(int(cx + half_x), thumb_w - 1)
        y1 = min(int(cy + half_y), thumb_h - 1)
        boxes.append((x0, y0, x1, y1))
    return boxes


def render_thumbnail(
    slide: PyramidSlide,
    max_edge: int = DEFAULT_THUMB_EDGE,
    overlays: list[RegionSpec] | None = None,
) -> np.ndarray:
    """Whole-slide view with one outlined, visit-numbered box per overlay.

    The raster comes from the slide's thumbnail level, downscaled (never
    upscaled) so its long edge is at most `max_edge`.
    """
    if max_edge <= 0:
        raise ValueError("max_edge must be positive")
    level = thumbnail_level(slide)
    raw = slide.read_level(level)
    h, w = raw.shape[:2]
    scale = min(1.0, max_edge / max(w, h))
    tw = max(1, int(round(w * scale)))
    th = max(1, int(round(h * scale)))
    img = Image.fromarray(raw)
    if (tw, th) != (w, h):
        img = img.resize((tw, th), Image.BILINEAR)
    if not overlays:
        return np.asarray(img)
    draw = ImageDraw.Draw(img)
    for order, box in enumerate(overlay_boxes(slide, tw, th, overlays), start=1):
        draw.rectangle(box, outline=OVERLAY_COLOR, width=2)
        draw.text((box[0] + 3, box[1] + 2), str(order), fill=OVERLAY_COLOR)
    return np.asarray(img)


@dataclass
class TissueMask:
    """Binary foreground occupancy on a cell grid at the thumbnail level."""

    grid: np.ndarray  # bool, (cells_y, cells_x)
    thumbnail_level: int
    foreground_fraction: float
    cell_px: int
    thumb_w: int
    thumb_h: int

    def contains(self, p: NormPoint) -> bool:
        px = min(int(p.x * self.thumb_w), self.thumb_w - 1)
        py = min(int(p.y * self.thumb_h), self.thumb_h - 1)
        return bool(self.grid[py // self.cell_px, px // self.cell_px])

    def contains_xy(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Vectorized membership for arrays of normalized coordinates."""
        px = np.minimum((x * self.thumb_w).astype(np.int64), self.thumb_w - 1)
        py = np.minimum((y * self.thumb_h).astype(np.int64), self.thumb_h - 1)
        return self.grid[py // self.cell_px, px // self.cell_px]


def saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation on a 0-1 scale; zero for black pixels."""
    arr = rgb.astype(np.float32) / 255.0
    mx = arr.max(axis=-1)
    mn = arr.min(axis=-1)
    out = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out


def compute_tissue_mask(
    slide: PyramidSlide,
    saturation_threshold: float = 0.08,
    min_fraction: float = 0.005,
    cell_px: int = 16,
) -> TissueMask:
    """Threshold mean cell saturation on the thumbnail level.

    A cell is foreground iff the mean saturation of its pixels exceeds the
    threshold. Raises DegenerateSlideError when the foreground fraction falls
    below `min_fraction` (e.g. a blank slide).
    """
    level = thumbnail_level(slide)
    raw = slide.read_level(level)
    sat = saturation(raw)
    h, w = sat.shape
    cy = -(-h // cell_px)
    cx = -(-w // cell_px)
    padded = np.zeros((cy * cell_px, cx * cell_px), dtype=np.float32)
    padded[:h, :w] = sat
    counts = np.zeros_like(padded)
    counts[:h, :w] = 1.0
    sums = padded.reshape(cy, cell_px, cx, cell_px).sum(axis=(1, 3))
    ns = counts.reshape(cy, cell_px, cx, cell_px).sum(axis=(1, 3))
    grid = (sums / ns) > saturation_threshold
    frac = float(grid.mean())
    if frac < min_fraction:
        raise DegenerateSlideError(
            f"foreground fraction {frac:.4f} below minimum {min_fraction}"
        )
    return TissueMask(
        grid=grid,
        thumbnail_level=level,
        foreground_fraction=frac,
        cell_px=cell_px,
        thumb_w=w,
        thumb_h=h,
    )


def downsample_2x(arr: np.ndarray) -> np.ndarray:
    """Mean over 2x2 blocks with edge replication for odd dimensions."""
    h, w = arr.shape[:2]
    if h % 2:
        arr = np.concatenate([arr, arr[-1:]], axis=0)
    if w % 2:
        arr = np.concatenate([arr, arr[:, -1:]], axis=1)
    acc = arr[0::2, 0::2].astype(np.uint16)
    acc += arr[0::2, 1::2]
    acc += arr[1::2, 0::2]
    acc += arr[1::2, 1::2]
    acc += 2
    acc >>= 2
    return acc.astype(np.uint8)


def build_levels(level0: np.ndarray, level_count: int) -> list[np.ndarray]:
    """Materialize a pyramid from level 0 by repeated 2x2 averaging."""
    levels = [np.ascontiguousarray(level0, dtype=np.uint8)]
    for _ in range(level_count - 1):
        levels.append(downsample_2x(levels[-1]))
    return levels
