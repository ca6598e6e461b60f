"""Case report assembly, serialization, and heatmap overlay rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .diagnosis import GradeSummary, SlideMetrics, SubtypeSummary
from .errors import InvalidInput, ReportInconsistent
from .slide import SlidePyramid

SCHEMA_VERSION = 1

# fixed categorical palette for label-mode heatmaps
LABEL_PALETTE = [
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
]


def probability_color(p: float) -> tuple[int, int, int]:
    """Linear blue (p=0) to red (p=1) colormap, green fixed at 0."""
    r = int(np.floor(255.0 * p + 0.5))
    b = int(np.floor(255.0 * (1.0 - p) + 0.5))
    return (r, 0, b)


def render_heatmap(
    values: np.ndarray,
    pyramid: SlidePyramid,
    level: int,
    mode: str,
    alpha: float,
    grid_level: int,
    cell_size: int,
) -> np.ndarray:
    """Blend a per-patch value grid over a pyramid-level thumbnail.

    ``values`` covers ``grid_level`` in ``cell_size``-pixel cells: floats in
    [0, 1] for probability mode (NaN = no value), label indices for label mode
    (-1 = no value). Output has the thumbnail's dimensions.
    """
    if mode not in ("probability", "label"):
        raise InvalidInput(f"unknown heatmap mode {mode!r}")
    if not (0 <= alpha <= 1):
        raise InvalidInput("alpha must be in [0, 1]")
    values = np.asarray(values)
    src = pyramid.level(grid_level)
    expected = ((src.height + cell_size - 1) // cell_size, (src.width + cell_size - 1) // cell_size)
    if values.shape != expected:
        raise InvalidInput(f"grid shape {values.shape} does not align to level {grid_level} "
                           f"(expected {expected})")

    thumb = pyramid.level(level).pixels.astype(np.float64)
    color = np.zeros_like(thumb)
    covered = np.zeros(thumb.shape[:2], dtype=bool)
    scale = 2.0 ** (grid_level - level)  # grid-level px -> thumbnail px

    rows, cols = values.shape
    for i in range(rows):
        y0 = int(np.floor(i * cell_size * scale + 0.5))
        y1 = int(np.floor((i + 1) * cell_size * scale + 0.5))
        y1 = min(y1, thumb.shape[0])
        if y1 <= y0:
            continue
        for j in range(cols):
            v = values[i, j]
            if mode == "probability":
                if np.isnan(v):
                    continue
                c = probability_color(float(v))
            else:
                if int(v) < 0:
                    continue
                c = LABEL_PALETTE[int(v) % len(LABEL_PALETTE)]
            x0 = int(np.floor(j * cell_size * scale + 0.5))
            x1 = min(int(np.floor((j + 1) * cell_size * scale + 0.5)), thumb.shape[1])
            if x1 <= x0:
                continue
            color[y0:y1, x0:x1] = c
            covered[y0:y1, x0:x1] = True

    out = thumb.copy()
    out[covered] = alpha * color[covered] + (1.0 - alpha) * thumb[covered]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    slide_id: str
    metrics: SlideMetrics
    subtype: Optional[SubtypeSummary]
    grade: Optional[GradeSummary]
    artifacts: dict[str, str]
    provenance: dict
    ground_truth_comparison: Optional[dict] = None
    flags: list[str] = field(default_factory=list)


def build_case_report(
    metrics: SlideMetrics,
    subtype_summary: Optional[SubtypeSummary],
    grade_summary: Optional[GradeSummary],
    artifact_paths: dict[str, str],
    provenance: dict,
    case_id: str,
    slide_id: str,
    ground_truth: Optional[dict] = None,
    flags: Optional[list[str]] = None,
) -> CaseReport:
    """Assemble a whole-case report, refusing inconsistent numbers."""
    if metrics.tumor_area > metrics.tissue_area + 1e-9:
        raise ReportInconsistent("tumor_area exceeds tissue_area")
    if metrics.tissue_area > 0:
        expected = metrics.tumor_area / metrics.tissue_area
        if abs(metrics.tumor_fraction - expected) > 1e-9:
            raise ReportInconsistent("tumor_fraction does not equal tumor_area / tissue_area")
    elif metrics.tumor_fraction != 0.0:
        raise ReportInconsistent("tumor_fraction must be 0 on a zero-tissue slide")

    if subtype_summary is not None:
        if sum(subtype_summary.patch_counts) != subtype_summary.total_patches:
            raise ReportInconsistent("subtype patch counts do not sum to the tumor patch total")
        if abs(sum(subtype_summary.proportions) - 1.0) > 1e-9:
            raise ReportInconsistent("subtype proportions do not sum to 1")
    if grade_summary is not None:
        if abs(sum(grade_summary.grade_percentages) - 1.0) > 1e-9:
            raise ReportInconsistent("grade percentages do not sum to 1")
        if grade_summary.slide_grade not in (1, 2, 3, 4):
            raise ReportInconsistent("slide grade outside 1-4")

    comparison = None
    if ground_truth:
        comparison = {}
        if "subtype" in ground_truth and subtype_summary is not None:
            comparison["subtype"] = {
                "predicted": subtype_summary.slide_label,
                "reference": ground_truth["subtype"],
                "match": subtype_summary.slide_label == ground_truth["subtype"],
            }
        if "isup_grade" in ground_truth and grade_summary is not None:
            comparison["isup_grade"] = {
                "predicted": grade_summary.slide_grade,
                "reference": int(ground_truth["isup_grade"]),
                "match": grade_summary.slide_grade == int(ground_truth["isup_grade"]),
            }

    return CaseReport(
        case_id=case_id,
        slide_id=slide_id,
        metrics=metrics,
        subtype=subtype_summary,
        grade=grade_summary,
        artifacts=dict(artifact_paths),
        provenance=dict(provenance),
        ground_truth_comparison=comparison,
        flags=list(flags or []),
    )


def report_to_dict(report: CaseReport) -> dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "case": report.case_id,
        "slide": report.slide_id,
        "metrics": {
            "tissue_area_mm2": report.metrics.tissue_area,
            "tumor_area_mm2": report.metrics.tumor_area,
            "tumor_fraction": report.metrics.tumor_fraction,
        },
        "subtype": None,
        "grade": None,
        "artifacts": report.artifacts,
        "provenance": report.provenance,
        "flags": report.flags,
    }
    if report.subtype is not None:
        s = report.subtype
        d["subtype"] = {
            "labels": list(s.schema.labels),
            "patch_counts": s.patch_counts,
            "proportions": s.proportions,
            "areas_mm2": s.areas,
            "slide_label": s.slide_label,
            "slide_confidence": s.slide_confidence,
            "total_patches": s.total_patches,
        }
    if report.grade is not None:
        g = report.grade
        d["grade"] = {
            "g4_fraction": g.g4_fraction,
            "mean_probs_g123": list(g.mean_probs_g123),
            "grade_percentages": list(g.grade_percentages),
            "slide_grade": g.slide_grade,
        }
    if report.ground_truth_comparison is not None:
        d["ground_truth_comparison"] = report.ground_truth_comparison
    return d


def _format_text(report: CaseReport) -> str:
    m = report.metrics
    lines = [
        "Whole-case report",
        f"Case: {report.case_id}",
        f"Slide: {report.slide_id}",
        f"Tissue area: {m.tissue_area:.3f} mm2",
        f"Tumor area: {m.tumor_area:.3f} mm2",
        f"Tumor proportion: {100.0 * m.tumor_fraction:.1f}%",
    ]
    if report.subtype is not None:
        s = report.subtype
        lines.append(f"Subtype: {s.slide_label} (confidence {100.0 * s.slide_confidence:.1f}%)")
        for name, count, prop, area in zip(s.schema.labels, s.patch_counts, s.proportions, s.areas):
            lines.append(f"  {name}: {100.0 * prop:.1f}% ({count} patches, {area:.3f} mm2)")
    if report.grade is not None:
        g = report.grade
        lines.append(f"ISUP grade: {g.slide_grade}")
        for name, pct in zip(("G1", "G2", "G3", "G4"), g.grade_percentages):
            lines.append(f"  {name}: {100.0 * pct:.1f}%")
    if report.ground_truth_comparison:
        lines.append("Reference comparison:")
        for key, cmp_ in sorted(report.ground_truth_comparison.items()):
            verdict = "match" if cmp_["match"] else "MISMATCH"
            lines.append(f"  {key}: predicted {cmp_['predicted']} vs reference {cmp_['reference']} ({verdict})")
    if report.flags:
        lines.append("Flags: " + ", ".join(report.flags))
    return "\n".join(lines) + "\n"


def serialize_report(report: CaseReport, format: str = "json", check_artifacts: bool = True) -> bytes:
    """Serialize to canonical JSON (sorted keys, stable bytes) or the text template."""
    if check_artifacts:
        for name, path in report.artifacts.items():
            if not Path(path).exists():
                raise ReportInconsistent(f"artifact {name!r} missing at {path}")
    if format == "json":
        return (json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n").encode()
    if format == "text":
        return _format_text(report).encode()
    raise InvalidInput(f"unknown report format {format!r}")
