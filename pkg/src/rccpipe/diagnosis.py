"""Slide-level diagnosis: tumor detection maps, subtype and grade aggregation.

Patch classification fans out over a thread pool; aggregation uses exact
summation (math.fsum) so summaries are identical under any record permutation
and any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import EmptySlide, InvalidInput, NoTumorDetected
from .inference import ClassifierHandle, LabelSchema, argmax_label, predict
from .slide import BinaryMask, Patch, PatchCoordinate, SlidePyramid, read_region
from .triage import TriageConfig, Verdict, needs_secondary, triage_patch

Preprocess = Callable[[Patch], Patch]

DEFAULT_G4_THRESHOLD = 0.5
DEFAULT_G4_OVERRIDE = 0.05


@dataclass(frozen=True)
class TumorPatchRecord:
    coord: PatchCoordinate
    p_tumor: float
    is_tumor: bool
    triaged: bool
    provenance: str


@dataclass(frozen=True)
class TumorMap:
    level: int
    patch_size: int
    records: list[TumorPatchRecord]

    def tumor_records(self) -> list[TumorPatchRecord]:
        return [r for r in self.records if r.is_tumor]

    @property
    def trigger_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.triaged for r in self.records) / len(self.records)


@dataclass(frozen=True)
class SlideMetrics:
    tissue_area: float  # mm^2
    tumor_area: float   # mm^2
    tumor_fraction: float


@dataclass(frozen=True)
class SubtypeSummary:
    schema: LabelSchema
    patch_counts: list[int]
    proportions: list[float]
    areas: list[float]  # mm^2 per label
    slide_label: str
    slide_confidence: float
    total_patches: int


@dataclass(frozen=True)
class GradeRecord:
    coord: PatchCoordinate
    p_g4: float
    is_g4: bool
    grade3_probs: Optional[np.ndarray]  # retained full vector for non-G4 patches


@dataclass(frozen=True)
class GradeSummary:
    g4_fraction: float
    mean_probs_g123: list[float]
    grade_percentages: list[float]  # [G1, G2, G3, G4]
    slide_grade: int


def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def detect_tumor(
    pyramid: SlidePyramid,
    coords: list[PatchCoordinate],
    handles: dict[str, ClassifierHandle],
    cfg: TriageConfig,
    preprocess: Optional[Preprocess] = None,
    workers: int = 1,
    audit: Optional[list] = None,
) -> TumorMap:
    """Classify every grid patch; band-interior patches go through the triage vote."""
    if not coords:
        raise EmptySlide("detection grid is empty")
    base = handles["base"]

    def score(coord: PatchCoordinate) -> TumorPatchRecord:
        patch = read_region(pyramid, coord)
        scored = preprocess(patch) if preprocess is not None else patch
        p = float(predict(base, scored).values[1])
        if needs_secondary(p, cfg):
            verdict, strategy_audit = triage_patch(handles, pyramid, coord, patch, cfg, preprocess)
            if audit is not None:
                audit.append({"coord": [coord.level, coord.x, coord.y], "base_p": p,
                              "strategies": strategy_audit, "is_tumor": verdict.is_tumor})
            return TumorPatchRecord(coord=coord, p_tumor=verdict.probability,
                                    is_tumor=verdict.is_tumor, triaged=True,
                                    provenance=verdict.provenance)
        return TumorPatchRecord(coord=coord, p_tumor=p,
                                is_tumor=p >= cfg.decision_threshold, triaged=False,
                                provenance="base")

    records = _map_ordered(score, coords, workers)
    return TumorMap(level=coords[0].level, patch_size=coords[0].size, records=records)


def slide_metrics(tumor_map: TumorMap, mask: BinaryMask, mpp: float, patch_size: int) -> SlideMetrics:
    """Physical tissue/tumor areas from patch counts; zero-tissue slides yield all zeros."""
    patch_area = (patch_size * mpp / 1000.0) ** 2  # mm^2
    tissue_count = len(tumor_map.records)
    tumor_count = sum(r.is_tumor for r in tumor_map.records)
    tissue_area = tissue_count * patch_area
    tumor_area = tumor_count * patch_area
    fraction = tumor_area / tissue_area if tissue_area > 0 else 0.0
    return SlideMetrics(tissue_area=tissue_area, tumor_area=tumor_area, tumor_fraction=fraction)


def _overlap_fraction(grid: np.ndarray, stride: float, x0: float, y0: float, size: float) -> float:
    """Fraction of rect [x0, x0+size) x [y0, y0+size) covered by true grid cells."""
    rows, cols = grid.shape
    i0 = max(int(y0 // stride), 0)
    i1 = min(int(math.ceil((y0 + size) / stride)), rows)
    j0 = max(int(x0 // stride), 0)
    j1 = min(int(math.ceil((x0 + size) / stride)), cols)
    area = 0.0
    for i in range(i0, i1):
        oy = min((i + 1) * stride, y0 + size) - max(i * stride, y0)
        if oy <= 0:
            continue
        for j in range(j0, j1):
            if not grid[i, j]:
                continue
            ox = min((j + 1) * stride, x0 + size) - max(j * stride, x0)
            if ox > 0:
                area += ox * oy
    return area / (size * size)


def regrid_tumor(
    pyramid: SlidePyramid,
    tumor_map: TumorMap,
    patch_size: int,
    level: int,
    min_overlap: float = 0.5,
) -> list[PatchCoordinate]:
    """Grid the detected tumor region at a task's own patch size.

    A patch counts as tumor when at least ``min_overlap`` of its area overlaps
    tumor detection patches (compared in a common coordinate frame).
    """
    det_level = tumor_map.level
    lvl = pyramid.level(det_level)
    stride = tumor_map.patch_size
    rows = (lvl.height + stride - 1) // stride
    cols = (lvl.width + stride - 1) // stride
    grid = np.zeros((rows, cols), dtype=bool)
    for r in tumor_map.tumor_records():
        grid[r.coord.y // stride, r.coord.x // stride] = True

    target = pyramid.level(level)
    scale = 2.0 ** (level - det_level)  # target-level px -> det-level px
    coords = []
    for y in range(0, target.height, patch_size):
        for x in range(0, target.width, patch_size):
            frac = _overlap_fraction(grid, stride, x * scale, y * scale, patch_size * scale)
            if frac >= min_overlap:
                coords.append(PatchCoordinate(level=level, x=x, y=y, size=patch_size))
    return coords


def classify_subtypes(
    pyramid: SlidePyramid,
    coords: list[PatchCoordinate],
    handle: ClassifierHandle,
    mpp: float,
    preprocess: Optional[Preprocess] = None,
    workers: int = 1,
) -> tuple[SubtypeSummary, list[dict]]:
    """Argmax-label every tumor patch and aggregate plurality proportions."""
    if not coords:
        raise NoTumorDetected("no tumor patches to subtype")
    schema = handle.schema

    def score(coord: PatchCoordinate):
        patch = read_region(pyramid, coord)
        scored = preprocess(patch) if preprocess is not None else patch
        probs = predict(handle, scored)
        return coord, probs.values, argmax_label(probs)

    results = _map_ordered(score, coords, workers)
    n = len(results)
    counts = [0] * schema.arity
    win_prob_sums = [[] for _ in range(schema.arity)]
    records = []
    for coord, values, label in results:
        counts[label] += 1
        win_prob_sums[label].append(float(values[label]))
        records.append({"coord": [coord.level, coord.x, coord.y], "probs": [float(v) for v in values],
                        "label": schema.labels[label]})

    proportions = [c / n for c in counts]
    patch_area = (coords[0].size * mpp / 1000.0) ** 2
    areas = [c * patch_area for c in counts]
    mean_win = [math.fsum(v) / len(v) if v else 0.0 for v in win_prob_sums]
    # plurality; ties by higher mean winning probability, then lowest index
    best = max(range(schema.arity), key=lambda i: (counts[i], mean_win[i], -i))
    summary = SubtypeSummary(
        schema=schema,
        patch_counts=counts,
        proportions=proportions,
        areas=areas,
        slide_label=schema.labels[best],
        slide_confidence=mean_win[best],
        total_patches=n,
    )
    return summary, records


def grade_patches(
    pyramid: SlidePyramid,
    coords: list[PatchCoordinate],
    g4_handle: ClassifierHandle,
    g123_handle: ClassifierHandle,
    g4_threshold: float = DEFAULT_G4_THRESHOLD,
    preprocess: Optional[Preprocess] = None,
    workers: int = 1,
) -> list[GradeRecord]:
    """Dichotomize each tumor patch as G4 / non-G4; non-G4 patches keep their
    full three-grade probability vector (no argmax)."""
    if not coords:
        raise NoTumorDetected("no tumor patches to grade")

    def score(coord: PatchCoordinate) -> GradeRecord:
        patch = read_region(pyramid, coord)
        scored = preprocess(patch) if preprocess is not None else patch
        p_g4 = float(predict(g4_handle, scored).values[1])
        if p_g4 >= g4_threshold:
            return GradeRecord(coord=coord, p_g4=p_g4, is_g4=True, grade3_probs=None)
        probs = predict(g123_handle, scored)
        return GradeRecord(coord=coord, p_g4=p_g4, is_g4=False, grade3_probs=probs.values)

    return _map_ordered(score, coords, workers)


def aggregate_grade(records: list[GradeRecord], g4_override: float = DEFAULT_G4_OVERRIDE) -> GradeSummary:
    """Whole-tumor grade aggregation over retained probability vectors."""
    if not records:
        raise InvalidInput("cannot aggregate an empty record set")
    if not (0 < g4_override <= 1):
        raise InvalidInput("g4_override must be in (0, 1]")
    n = len(records)
    g4_count = sum(r.is_g4 for r in records)
    g4_fraction = g4_count / n

    non_g4 = [r for r in records if not r.is_g4]
    if non_g4:
        mean_g123 = [math.fsum(float(r.grade3_probs[i]) for r in non_g4) / len(non_g4)
                     for i in range(3)]
    else:
        mean_g123 = [0.0, 0.0, 0.0]

    raw = [m * (1.0 - g4_fraction) for m in mean_g123] + [g4_fraction]
    total = math.fsum(raw)
    percentages = [v / total for v in raw] if total > 0 else [0.0, 0.0, 0.0, 1.0]

    if g4_fraction >= g4_override:
        slide_grade = 4
    else:
        slide_grade = 1 + int(np.argmax(mean_g123))
    return GradeSummary(
        g4_fraction=g4_fraction,
        mean_probs_g123=mean_g123,
        grade_percentages=percentages,
        slide_grade=slide_grade,
    )


def cohens_kappa(labels_a, labels_b) -> float:
    """Chance-corrected inter-rater agreement over two equal-length sequences."""
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise InvalidInput("label sequences must have equal length")
    if not a:
        raise InvalidInput("label sequences must be non-empty")
    n = len(a)
    categories = sorted(set(a) | set(b), key=repr)
    p_o = sum(x == y for x, y in zip(a, b)) / n
    p_e = math.fsum((a.count(c) / n) * (b.count(c) / n) for c in categories)
    if math.isclose(p_e, 1.0):
        # single category throughout: full agreement defines kappa = 1
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)
