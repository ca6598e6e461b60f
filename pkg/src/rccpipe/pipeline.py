"""End-to-end orchestration: ingest, detect, subtype, grade, render, report.

Slides run sequentially with per-slide fault isolation; patch classification
inside a slide fans out over the configured worker pool. Given identical
config, manifest, and model versions, two runs produce byte-identical
report.json files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image

from . import __version__
from .config import CaseManifest, PipelineConfig, SlideEntry
from .diagnosis import (GradeSummary, SubtypeSummary, TumorMap, aggregate_grade,
                        classify_subtypes, detect_tumor, grade_patches, regrid_tumor,
                        slide_metrics)
from .errors import PipelineError
from .figures import render_summary_figure
from .inference import ClassifierHandle, load_classifier
from .report import (CaseReport, build_case_report, render_heatmap, serialize_report)
from .slide import (SlidePyramid, grid_patches, ingest_base_image, load_flat_image,
                    load_pyramid, save_pyramid, tissue_mask)
from .stain import StainProfile, normalize_patch

STAGES = ("detect", "subtype", "grade", "run")


@dataclass
class SlideOutcome:
    case_id: str
    slide_id: str
    status: str  # ok | failed
    report: Optional[CaseReport] = None
    report_path: Optional[Path] = None
    error: Optional[str] = None
    patch_count: int = 0
    trigger_rate: float = 0.0
    seconds: float = 0.0


@dataclass
class RunResult:
    outcomes: list[SlideOutcome]
    summary_path: Optional[Path] = None

    @property
    def reports(self) -> list[CaseReport]:
        return [o.report for o in self.outcomes if o.report is not None]

    @property
    def failed(self) -> int:
        return sum(o.status == "failed" for o in self.outcomes)


def _config_digest(config: PipelineConfig) -> str:
    return hashlib.sha256(repr(config).encode()).hexdigest()[:16]


def _pyramid_cache_dir(config: PipelineConfig, slide: SlideEntry) -> Path:
    h = hashlib.sha256()
    h.update(slide.image.read_bytes())
    h.update(f"{slide.mpp}|{slide.magnification}|{config.tile_size}".encode())
    return config.pyramid_store / f"{slide.slide_id}_{h.hexdigest()[:12]}"


def ingest_slide(config: PipelineConfig, case: CaseManifest, slide: SlideEntry,
                 force: bool = False) -> SlidePyramid:
    """Ingest a flat image into the pyramid store, reusing a cached pyramid by digest."""
    cache = _pyramid_cache_dir(config, slide)
    if cache.is_dir() and not force:
        return load_pyramid(cache)
    image = load_flat_image(slide.image)
    pyramid = ingest_base_image(
        image,
        mpp_base=slide.mpp,
        magnification_base=slide.magnification,
        tile_size=config.tile_size,
        slide_id=slide.slide_id,
        case_id=case.case_id,
        ground_truth=case.labels,
    )
    save_pyramid(pyramid, cache)
    return pyramid


def _make_preprocess(handle: ClassifierHandle, profile: Optional[StainProfile]):
    """Stain-normalize (when the handle asks for it) and resize to the input size."""
    if handle.backend == "lookup_table":
        return None
    normalize = profile is not None and handle.normalization == "macenko"
    size = handle.input_size

    def preprocess(patch):
        if normalize:
            patch, _ = normalize_patch(patch, profile)
        if patch.width != size or patch.height != size:
            resized = cv2.resize(patch.pixels, (size, size), interpolation=cv2.INTER_LINEAR)
            patch = dataclasses.replace(patch, pixels=resized)
        return patch

    return preprocess


def _load_handles(config: PipelineConfig) -> dict[str, ClassifierHandle]:
    return {name: load_classifier(path) for name, path in config.models.items()}


def _write_png(pixels: np.ndarray, path: Path) -> None:
    Image.fromarray(pixels).save(path)


def _tumor_value_grid(pyramid: SlidePyramid, tumor_map: TumorMap) -> np.ndarray:
    lvl = pyramid.level(tumor_map.level)
    ps = tumor_map.patch_size
    grid = np.full(((lvl.height + ps - 1) // ps, (lvl.width + ps - 1) // ps), np.nan)
    for r in tumor_map.records:
        grid[r.coord.y // ps, r.coord.x // ps] = r.p_tumor
    return grid


def _label_grid(pyramid: SlidePyramid, level: int, patch_size: int,
                labeled: list[tuple[int, int, int]]) -> np.ndarray:
    lvl = pyramid.level(level)
    ps = patch_size
    grid = np.full(((lvl.height + ps - 1) // ps, (lvl.width + ps - 1) // ps), -1, dtype=np.int64)
    for x, y, label in labeled:
        grid[y // ps, x // ps] = label
    return grid


def run_slide(
    config: PipelineConfig,
    case: CaseManifest,
    slide: SlideEntry,
    handles: dict[str, ClassifierHandle],
    profile: Optional[StainProfile],
    stage: str = "run",
    force_ingest: bool = False,
) -> SlideOutcome:
    started = time.monotonic()
    out_dir = config.output_dir / case.case_id / slide.slide_id
    out_dir.mkdir(parents=True, exist_ok=True)

    pyramid = ingest_slide(config, case, slide, force=force_ingest)
    thumb_level = len(pyramid.levels) - 1

    det_level = config.level_for(pyramid, config.detection)
    mask = tissue_mask(pyramid, det_level, config.od_threshold, config.mask_stride)
    coords = grid_patches(pyramid, pyramid.mpp_at(det_level), config.detection.patch_size,
                          mask, config.min_tissue_fraction)

    flags: list[str] = []
    artifacts: dict[str, str] = {}
    patch_records: list[dict] = []
    audit: list[dict] = []
    subtype_summary: Optional[SubtypeSummary] = None
    grade_summary: Optional[GradeSummary] = None

    tumor_handles = {"base": handles["tumor"]}
    if "magnification" in handles:
        tumor_handles["magnification"] = handles["magnification"]
    preprocess = _make_preprocess(handles["tumor"], profile)

    if coords:
        tumor_map = detect_tumor(pyramid, coords, tumor_handles, config.triage,
                                 preprocess=preprocess, workers=config.workers, audit=audit)
        metrics = slide_metrics(tumor_map, mask, pyramid.mpp_at(det_level),
                                config.detection.patch_size)
        for r in tumor_map.records:
            patch_records.append({
                "stage": "detect",
                "coord": [r.coord.level, r.coord.x, r.coord.y],
                "p_tumor": r.p_tumor,
                "is_tumor": r.is_tumor,
                "triaged": r.triaged,
                "provenance": r.provenance,
            })
        trigger_rate = tumor_map.trigger_rate
    else:
        tumor_map = TumorMap(level=det_level, patch_size=config.detection.patch_size, records=[])
        metrics = slide_metrics(tumor_map, mask, pyramid.mpp_at(det_level),
                                config.detection.patch_size)
        flags.append("zero_tissue_review")
        trigger_rate = 0.0

    # heatmaps and thumbnail
    _write_png(pyramid.level(thumb_level).pixels, out_dir / "thumbnail.png")
    artifacts["thumbnail"] = "thumbnail.png"
    if tumor_map.records:
        heat = render_heatmap(_tumor_value_grid(pyramid, tumor_map), pyramid, thumb_level,
                              "probability", config.heatmap_alpha, det_level,
                              config.detection.patch_size)
        _write_png(heat, out_dir / "tumor_heatmap.png")
        artifacts["tumor_heatmap"] = "tumor_heatmap.png"

    want_subtype = stage in ("subtype", "grade", "run") and "subtype" in handles
    want_grade = stage in ("grade", "run") and "g4" in handles and "grade3" in handles
    has_tumor = bool(tumor_map.tumor_records())
    if (want_subtype or want_grade) and not has_tumor and coords:
        flags.append("no_tumor_detected")

    if want_subtype and has_tumor:
        sub_level = config.level_for(pyramid, config.subtype)
        sub_coords = regrid_tumor(pyramid, tumor_map, config.subtype.patch_size,
                                  sub_level, config.min_tumor_overlap)
        if sub_coords:
            subtype_summary, sub_records = classify_subtypes(
                pyramid, sub_coords, handles["subtype"], pyramid.mpp_at(sub_level),
                preprocess=_make_preprocess(handles["subtype"], profile),
                workers=config.workers,
            )
            labels = list(handles["subtype"].schema.labels)
            labeled = [(rec["coord"][1], rec["coord"][2], labels.index(rec["label"]))
                       for rec in sub_records]
            heat = render_heatmap(
                _label_grid(pyramid, sub_level, config.subtype.patch_size, labeled),
                pyramid, thumb_level, "label", config.heatmap_alpha,
                sub_level, config.subtype.patch_size)
            _write_png(heat, out_dir / "subtype_heatmap.png")
            artifacts["subtype_heatmap"] = "subtype_heatmap.png"
            for rec in sub_records:
                patch_records.append({"stage": "subtype", **rec})
        else:
            flags.append("subtype_grid_empty")

    if want_grade and has_tumor:
        grd_level = config.level_for(pyramid, config.grade)
        grd_coords = regrid_tumor(pyramid, tumor_map, config.grade.patch_size,
                                  grd_level, config.min_tumor_overlap)
        if grd_coords:
            records = grade_patches(
                pyramid, grd_coords, handles["g4"], handles["grade3"],
                g4_threshold=config.g4_threshold,
                preprocess=_make_preprocess(handles["g4"], profile),
                workers=config.workers,
            )
            grade_summary = aggregate_grade(records, g4_override=config.g4_override)
            labeled = []
            for r in records:
                label = 3 if r.is_g4 else int(np.argmax(r.grade3_probs))
                labeled.append((r.coord.x, r.coord.y, label))
                patch_records.append({
                    "stage": "grade",
                    "coord": [r.coord.level, r.coord.x, r.coord.y],
                    "p_g4": r.p_g4,
                    "is_g4": r.is_g4,
                    "grade3_probs": None if r.grade3_probs is None
                    else [float(v) for v in r.grade3_probs],
                })
            heat = render_heatmap(
                _label_grid(pyramid, grd_level, config.grade.patch_size, labeled),
                pyramid, thumb_level, "label", config.heatmap_alpha,
                grd_level, config.grade.patch_size)
            _write_png(heat, out_dir / "grade_heatmap.png")
            artifacts["grade_heatmap"] = "grade_heatmap.png"
        else:
            flags.append("grade_grid_empty")

    with open(out_dir / "patches.jsonl", "w") as fh:
        for rec in patch_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out_dir / "triage_audit.jsonl", "w") as fh:
        for rec in audit:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    provenance = {
        "engine_version": __version__,
        "config_digest": _config_digest(config),
        "model_versions": {name: h.version for name, h in sorted(handles.items())},
        "seed": config.seed,
    }
    report = build_case_report(
        metrics, subtype_summary, grade_summary, artifacts, provenance,
        case_id=case.case_id, slide_id=slide.slide_id,
        ground_truth=pyramid.ground_truth, flags=flags,
    )
    report_path = out_dir / "report.json"
    # artifact existence is checked against the slide output directory
    for name, rel in artifacts.items():
        if not (out_dir / rel).exists():
            raise PipelineError(f"artifact {name} missing")
    report_path.write_bytes(serialize_report(report, "json", check_artifacts=False))
    (out_dir / "report.txt").write_bytes(serialize_report(report, "text", check_artifacts=False))
    render_summary_figure(report, out_dir / "summary_figure.png")

    return SlideOutcome(
        case_id=case.case_id,
        slide_id=slide.slide_id,
        status="ok",
        report=report,
        report_path=report_path,
        patch_count=len(tumor_map.records),
        trigger_rate=trigger_rate,
        seconds=time.monotonic() - started,
    )


def run_pipeline(
    config: PipelineConfig,
    manifests: list[CaseManifest],
    stage: str = "run",
    force_ingest: bool = False,
) -> RunResult:
    """Run all slides of all cases; per-slide failures never abort the cohort."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    config.pyramid_store.mkdir(parents=True, exist_ok=True)
    handles = _load_handles(config)
    if "tumor" not in handles:
        raise PipelineError("a tumor detection model (models.tumor) is required")
    profile = StainProfile.load(config.stain_profile) if config.stain_profile else None

    outcomes: list[SlideOutcome] = []
    for case in manifests:
        for slide in case.slides:
            try:
                outcomes.append(run_slide(config, case, slide, handles, profile,
                                          stage=stage, force_ingest=force_ingest))
            except Exception as exc:
                outcomes.append(SlideOutcome(
                    case_id=case.case_id, slide_id=slide.slide_id,
                    status="failed", error=f"{type(exc).__name__}: {exc}",
                ))

    summary = {
        "engine_version": __version__,
        "config_digest": _config_digest(config),
        "stage": stage,
        "slides": [
            {
                "case_id": o.case_id,
                "slide_id": o.slide_id,
                "status": o.status,
                "patch_count": o.patch_count,
                "trigger_rate": o.trigger_rate,
                "seconds": round(o.seconds, 3),
                "error": o.error,
            }
            for o in outcomes
        ],
        "total_patches": sum(o.patch_count for o in outcomes),
        "failed_slides": sum(o.status == "failed" for o in outcomes),
    }
    summary_path = config.output_dir / "run_summary.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")

    with open(config.output_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "slide_id", "status", "tissue_area_mm2", "tumor_area_mm2",
                         "tumor_fraction", "subtype", "isup_grade"])
        for o in outcomes:
            r = o.report
            writer.writerow([
                o.case_id, o.slide_id, o.status,
                f"{r.metrics.tissue_area:.6f}" if r else "",
                f"{r.metrics.tumor_area:.6f}" if r else "",
                f"{r.metrics.tumor_fraction:.6f}" if r else "",
                r.subtype.slide_label if r and r.subtype else "",
                r.grade.slide_grade if r and r.grade else "",
            ])

    return RunResult(outcomes=outcomes, summary_path=summary_path)
