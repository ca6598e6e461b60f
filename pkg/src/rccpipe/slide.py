"""Slide pyramid representation: ingestion, region reads, tissue masks, patch grids.

A slide is stored in memory as a list of levels, each a dense ``(h, w, 3)``
uint8 array. Level 0 is full resolution; each subsequent level is a 2x2
box-average downsample (ceil dimensions, round-half-up). On disk a pyramid is
a directory with a ``manifest.json`` and raw RGB tile files per level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import InvalidInput
from .stain import od_lookup_table

DEFAULT_TILE_SIZE = 512
DEFAULT_OD_THRESHOLD = 0.15
DEFAULT_MIN_TISSUE_FRACTION = 0.5


@dataclass(frozen=True)
class Level:
    index: int
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8


@dataclass(frozen=True)
class PatchCoordinate:
    level: int
    x: int
    y: int
    size: int

    def key(self) -> tuple[int, int, int]:
        return (self.level, self.x, self.y)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray  # (height, width, 3) uint8
    origin: tuple[int, int, int]  # (level, x, y)
    mpp: float
    partial: bool = False

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    level: int
    stride: int
    grid: np.ndarray  # (rows, cols) bool


@dataclass(frozen=True)
class SlidePyramid:
    slide_id: str
    case_id: str
    mpp_base: float
    magnification_base: float
    tile_size: int
    levels: list[Level]
    ground_truth: Optional[dict] = None

    def level(self, index: int) -> Level:
        if index < 0 or index >= len(self.levels):
            raise InvalidInput(f"level {index} does not exist (pyramid has {len(self.levels)})")
        return self.levels[index]

    def mpp_at(self, level: int) -> float:
        self.level(level)
        return self.mpp_base * (2 ** level)

    def magnification_at(self, level: int) -> float:
        self.level(level)
        return self.magnification_base / (2 ** level)

    def level_for_mpp(self, target_mpp: float) -> int:
        """Level whose effective mpp equals target_mpp (exact power-of-two multiple)."""
        if target_mpp <= 0:
            raise InvalidInput("target_mpp must be positive")
        ratio = target_mpp / self.mpp_base
        level = round(math.log2(ratio))
        if level < 0 or level >= len(self.levels):
            raise InvalidInput(f"no level with mpp {target_mpp} (base {self.mpp_base})")
        if not math.isclose(2 ** level, ratio, rel_tol=1e-6):
            raise InvalidInput(f"target_mpp {target_mpp} is not a power-of-two multiple of base {self.mpp_base}")
        return level


def _downsample_2x2(pixels: np.ndarray) -> np.ndarray:
    """2x2 box average with ceil dims; round-half-up. Edge cells average available pixels."""
    h, w = pixels.shape[:2]
    if h % 2 or w % 2:
        pixels = np.pad(pixels, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    # accumulate quarter-size slices in uint32; avoids a full-image upcast
    total = pixels[0::2, 0::2].astype(np.uint32)
    for dy, dx in ((1, 0), (0, 1), (1, 1)):
        np.add(total, pixels[dy::2, dx::2], out=total, casting="unsafe")
    total += 2
    total //= 4
    return total.astype(np.uint8)


def ingest_base_image(
    image: np.ndarray,
    mpp_base: float,
    magnification_base: float,
    tile_size: int = DEFAULT_TILE_SIZE,
    slide_id: str = "slide",
    case_id: str = "case",
    ground_truth: Optional[dict] = None,
) -> SlidePyramid:
    """Build a full pyramid from a flat RGB image by repeated 2x2 box downsampling."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInput("expected an RGB image of shape (h, w, 3)")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise InvalidInput("zero-area image")
    if mpp_base <= 0:
        raise InvalidInput("mpp_base must be positive")
    if tile_size < 64 or tile_size & (tile_size - 1) != 0:
        raise InvalidInput("tile_size must be a power of two >= 64")
    image = image.astype(np.uint8, copy=True)

    levels = [Level(0, image.shape[1], image.shape[0], image)]
    while max(levels[-1].width, levels[-1].height) > tile_size:
        down = _downsample_2x2(levels[-1].pixels)
        levels.append(Level(len(levels), down.shape[1], down.shape[0], down))
    return SlidePyramid(
        slide_id=slide_id,
        case_id=case_id,
        mpp_base=float(mpp_base),
        magnification_base=float(magnification_base),
        tile_size=tile_size,
        levels=levels,
        ground_truth=ground_truth,
    )


def read_region(pyramid: SlidePyramid, coord: PatchCoordinate) -> Patch:
    """Read a size x size RGB patch; out-of-bounds area is zero-filled and flags the patch."""
    lvl = pyramid.level(coord.level)
    if coord.size <= 0:
        raise InvalidInput("patch size must be positive")
    out = np.zeros((coord.size, coord.size, 3), dtype=np.uint8)
    x0 = max(coord.x, 0)
    y0 = max(coord.y, 0)
    x1 = min(coord.x + coord.size, lvl.width)
    y1 = min(coord.y + coord.size, lvl.height)
    partial = (x0 != coord.x or y0 != coord.y
               or x1 != coord.x + coord.size or y1 != coord.y + coord.size)
    if x1 > x0 and y1 > y0:
        out[y0 - coord.y:y1 - coord.y, x0 - coord.x:x1 - coord.x] = lvl.pixels[y0:y1, x0:x1]
    else:
        partial = True
    return Patch(
        pixels=out,
        origin=(coord.level, coord.x, coord.y),
        mpp=pyramid.mpp_at(coord.level),
        partial=partial,
    )


def tissue_mask(
    pyramid: SlidePyramid,
    level: int,
    od_threshold: float = DEFAULT_OD_THRESHOLD,
    stride: int = 64,
) -> BinaryMask:
    """Mark stride x stride cells whose mean per-pixel optical density >= threshold.

    OD is the channel mean of -log10((v+1)/256) per pixel.
    """
    if not (0 < od_threshold < 3):
        raise InvalidInput("od_threshold must be in (0, 3)")
    if stride <= 0:
        raise InvalidInput("stride must be positive")
    lvl = pyramid.level(level)
    lut = od_lookup_table(io=255).astype(np.float64)

    row_idx = np.arange(0, lvl.height, stride)
    col_idx = np.arange(0, lvl.width, stride)
    # one stride-row band at a time keeps peak memory at O(stride * width)
    sums = np.empty((len(row_idx), len(col_idx)))
    for i, y0 in enumerate(row_idx):
        band = lut[lvl.pixels[y0:y0 + stride]].mean(axis=2)
        sums[i] = np.add.reduceat(band.sum(axis=0), col_idx)
    row_counts = np.minimum(row_idx + stride, lvl.height) - row_idx
    col_counts = np.minimum(col_idx + stride, lvl.width) - col_idx
    counts = row_counts[:, None] * col_counts[None, :]
    means = sums / counts
    return BinaryMask(level=level, stride=stride, grid=means >= od_threshold)


def _tissue_fraction(mask: BinaryMask, x: int, y: int, size: int) -> float:
    """Fraction of the patch's area covered by mask-true cells (out-of-bounds counts false)."""
    s = mask.stride
    rows, cols = mask.grid.shape
    j0, j1 = x // s, (x + size + s - 1) // s
    i0, i1 = y // s, (y + size + s - 1) // s
    area = 0.0
    for i in range(max(i0, 0), min(i1, rows)):
        oy = min((i + 1) * s, y + size) - max(i * s, y)
        if oy <= 0:
            continue
        for j in range(max(j0, 0), min(j1, cols)):
            if not mask.grid[i, j]:
                continue
            ox = min((j + 1) * s, x + size) - max(j * s, x)
            if ox > 0:
                area += ox * oy
    return area / float(size * size)


def grid_patches(
    pyramid: SlidePyramid,
    target_mpp: float,
    patch_size: int,
    mask: BinaryMask,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
) -> list[PatchCoordinate]:
    """Non-overlapping row-major patch grid over a level, filtered by tissue fraction."""
    level = pyramid.level_for_mpp(target_mpp)
    if mask.level != level:
        raise InvalidInput(f"mask level {mask.level} does not match patch level {level}")
    lvl = pyramid.level(level)
    coords = []
    for y in range(0, lvl.height, patch_size):
        for x in range(0, lvl.width, patch_size):
            if _tissue_fraction(mask, x, y, patch_size) >= min_tissue_fraction:
                coords.append(PatchCoordinate(level=level, x=x, y=y, size=patch_size))
    return coords


# ---------------------------------------------------------------------------
# Persistence: manifest.json + L{index}/{row}_{col}.rgb raw tiles
# ---------------------------------------------------------------------------

def save_pyramid(pyramid: SlidePyramid, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "slide_id": pyramid.slide_id,
        "case_id": pyramid.case_id,
        "mpp_base": pyramid.mpp_base,
        "magnification_base": pyramid.magnification_base,
        "tile_size": pyramid.tile_size,
        "levels": [{"index": l.index, "width": l.width, "height": l.height} for l in pyramid.levels],
    }
    if pyramid.ground_truth is not None:
        manifest["ground_truth"] = pyramid.ground_truth
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    t = pyramid.tile_size
    for lvl in pyramid.levels:
        lvl_dir = out / f"L{lvl.index}"
        lvl_dir.mkdir(exist_ok=True)
        n_rows = (lvl.height + t - 1) // t
        n_cols = (lvl.width + t - 1) // t
        for row in range(n_rows):
            for col in range(n_cols):
                tile = np.zeros((t, t, 3), dtype=np.uint8)
                y0, x0 = row * t, col * t
                y1, x1 = min(y0 + t, lvl.height), min(x0 + t, lvl.width)
                tile[: y1 - y0, : x1 - x0] = lvl.pixels[y0:y1, x0:x1]
                (lvl_dir / f"{row}_{col}.rgb").write_bytes(tile.tobytes())
    return out


def load_pyramid(pyramid_dir: str | Path) -> SlidePyramid:
    root = Path(pyramid_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise InvalidInput(f"not a pyramid directory: {root}")
    manifest = json.loads(manifest_path.read_text())
    t = int(manifest["tile_size"])
    levels = []
    for entry in manifest["levels"]:
        idx, w, h = int(entry["index"]), int(entry["width"]), int(entry["height"])
        pixels = np.zeros((h, w, 3), dtype=np.uint8)
        n_rows = (h + t - 1) // t
        n_cols = (w + t - 1) // t
        for row in range(n_rows):
            for col in range(n_cols):
                raw = (root / f"L{idx}" / f"{row}_{col}.rgb").read_bytes()
                if len(raw) != t * t * 3:
                    raise InvalidInput(f"tile L{idx}/{row}_{col}.rgb has wrong size")
                tile = np.frombuffer(raw, dtype=np.uint8).reshape(t, t, 3)
                y0, x0 = row * t, col * t
                y1, x1 = min(y0 + t, h), min(x0 + t, w)
                pixels[y0:y1, x0:x1] = tile[: y1 - y0, : x1 - x0]
        levels.append(Level(idx, w, h, pixels))
    return SlidePyramid(
        slide_id=manifest["slide_id"],
        case_id=manifest["case_id"],
        mpp_base=float(manifest["mpp_base"]),
        magnification_base=float(manifest["magnification_base"]),
        tile_size=t,
        levels=levels,
        ground_truth=manifest.get("ground_truth"),
    )


def load_flat_image(path: str | Path) -> np.ndarray:
    """Load a PPM (P6) or PNG image as an (h, w, 3) uint8 array."""
    path = Path(path)
    if path.suffix.lower() not in {".ppm", ".png"}:
        raise InvalidInput(f"unsupported image format: {path.suffix} (expected .ppm or .png)")
    # slides are gigapixel by design; PIL's decompression-bomb cap does not apply
    Image.MAX_IMAGE_PIXELS = None
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)
