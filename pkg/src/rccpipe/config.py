"""Pipeline configuration and case manifest loading.

Config files are TOML (primary) or JSON; unknown keys are rejected so typos
in thresholds fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError, InvalidInput
from .triage import TriageConfig


@dataclass(frozen=True)
class TaskParams:
    patch_size: int
    target_magnification: Optional[float] = None


@dataclass(frozen=True)
class PipelineConfig:
    pyramid_store: Path
    output_dir: Path
    models: dict[str, Path]
    stain_profile: Optional[Path] = None
    detection: TaskParams = field(default_factory=lambda: TaskParams(512))
    subtype: TaskParams = field(default_factory=lambda: TaskParams(1000))
    grade: TaskParams = field(default_factory=lambda: TaskParams(1000))
    triage: TriageConfig = field(default_factory=TriageConfig)
    od_threshold: float = 0.15
    mask_stride: int = 64
    min_tissue_fraction: float = 0.5
    min_tumor_overlap: float = 0.5
    g4_threshold: float = 0.5
    g4_override: float = 0.05
    heatmap_alpha: float = 0.4
    tile_size: int = 512
    workers: int = 1
    seed: int = 0

    def level_for(self, pyramid, task: TaskParams) -> int:
        """Pyramid level for a task's target magnification (level 0 when unset)."""
        if task.target_magnification is None:
            return 0
        ratio = pyramid.magnification_base / task.target_magnification
        level = round(math.log2(ratio))
        if level < 0 or not math.isclose(2 ** level, ratio, rel_tol=1e-6):
            raise InvalidInput(
                f"target magnification {task.target_magnification} is not a power-of-two "
                f"step down from base {pyramid.magnification_base}"
            )
        if level >= len(pyramid.levels):
            raise InvalidInput(f"pyramid has no level at magnification {task.target_magnification}")
        return level


_SCHEMA = {
    "paths": {"pyramid_store", "output_dir", "stain_profile"},
    "models": {"tumor", "subtype", "g4", "grade3", "magnification"},
    "detection": {"patch_size", "target_magnification", "min_tissue_fraction",
                  "od_threshold", "mask_stride"},
    "subtype": {"patch_size", "target_magnification", "min_tumor_overlap"},
    "grade": {"patch_size", "target_magnification", "g4_threshold", "g4_override"},
    "triage": {"low", "high", "decision_threshold", "magnification_factor",
               "enable_rotation_flip", "enable_magnification", "enable_neighbor"},
    "runtime": {"workers", "seed", "heatmap_alpha", "tile_size"},
}


def _check_keys(data: dict) -> None:
    for section, content in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"config section {section!r} must be a table")
        for key in content:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key!r}")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    _check_keys(data)

    paths = data.get("paths", {})
    if "pyramid_store" not in paths or "output_dir" not in paths:
        raise ConfigError("paths.pyramid_store and paths.output_dir are required")
    base = path.parent

    def resolve(p):
        return (base / p).resolve() if not Path(p).is_absolute() else Path(p)

    models = {}
    for name, model_path in data.get("models", {}).items():
        resolved = resolve(model_path)
        if not resolved.is_file():
            raise ConfigError(f"models.{name}: file not found: {resolved}")
        models[name] = resolved

    stain_profile = None
    if "stain_profile" in paths:
        stain_profile = resolve(paths["stain_profile"])
        if not stain_profile.is_file():
            raise ConfigError(f"paths.stain_profile: file not found: {stain_profile}")

    det = data.get("detection", {})
    sub = data.get("subtype", {})
    grd = data.get("grade", {})
    tri = data.get("triage", {})
    run = data.get("runtime", {})

    def positive_int(section, key, value):
        if not isinstance(value, int) or value <= 0:
            raise ConfigError(f"{section}.{key} must be a positive integer")
        return value

    try:
        triage = TriageConfig(
            low=float(tri.get("low", 0.2)),
            high=float(tri.get("high", 0.8)),
            decision_threshold=float(tri.get("decision_threshold", 0.5)),
            magnification_factor=int(tri.get("magnification_factor", 2)),
            enable_rotation_flip=bool(tri.get("enable_rotation_flip", True)),
            enable_magnification=bool(tri.get("enable_magnification", True)),
            enable_neighbor=bool(tri.get("enable_neighbor", True)),
        )
    except InvalidInput as exc:
        raise ConfigError(f"triage: {exc}") from exc

    cfg = PipelineConfig(
        pyramid_store=resolve(paths["pyramid_store"]),
        output_dir=resolve(paths["output_dir"]),
        models=models,
        stain_profile=stain_profile,
        detection=TaskParams(
            patch_size=positive_int("detection", "patch_size", det.get("patch_size", 512)),
            target_magnification=det.get("target_magnification"),
        ),
        subtype=TaskParams(
            patch_size=positive_int("subtype", "patch_size", sub.get("patch_size", 1000)),
            target_magnification=sub.get("target_magnification"),
        ),
        grade=TaskParams(
            patch_size=positive_int("grade", "patch_size", grd.get("patch_size", 1000)),
            target_magnification=grd.get("target_magnification"),
        ),
        triage=triage,
        od_threshold=float(det.get("od_threshold", 0.15)),
        mask_stride=positive_int("detection", "mask_stride", det.get("mask_stride", 64)),
        min_tissue_fraction=float(det.get("min_tissue_fraction", 0.5)),
        min_tumor_overlap=float(sub.get("min_tumor_overlap", 0.5)),
        g4_threshold=float(grd.get("g4_threshold", 0.5)),
        g4_override=float(grd.get("g4_override", 0.05)),
        heatmap_alpha=float(run.get("heatmap_alpha", 0.4)),
        tile_size=positive_int("runtime", "tile_size", run.get("tile_size", 512)),
        workers=positive_int("runtime", "workers", run.get("workers", 1)),
        seed=int(run.get("seed", 0)),
    )
    if not (0 < cfg.od_threshold < 3):
        raise ConfigError("detection.od_threshold must be in (0, 3)")
    for name, value in (("detection.min_tissue_fraction", cfg.min_tissue_fraction),
                        ("subtype.min_tumor_overlap", cfg.min_tumor_overlap),
                        ("grade.g4_threshold", cfg.g4_threshold)):
        if not (0 <= value <= 1):
            raise ConfigError(f"{name} must be in [0, 1]")
    if not (0 < cfg.g4_override <= 1):
        raise ConfigError("grade.g4_override must be in (0, 1]")
    if not (0 <= cfg.heatmap_alpha <= 1):
        raise ConfigError("runtime.heatmap_alpha must be in [0, 1]")
    return cfg


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    image: Path
    mpp: float
    magnification: float


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    slides: list[SlideEntry]
    labels: Optional[dict] = None
    source: Optional[str] = None


_SUBTYPES = {"ccRCC", "pRCC", "chRCC"}


def _parse_case(obj: dict, base: Path) -> CaseManifest:
    if "case_id" not in obj or not obj.get("slides"):
        raise ConfigError("each case needs a case_id and at least one slide")
    slides = []
    for i, s in enumerate(obj["slides"]):
        for key in ("image", "mpp", "magnification"):
            if key not in s:
                raise ConfigError(f"slide entry missing {key!r}")
        image = Path(s["image"])
        if not image.is_absolute():
            image = (base / image).resolve()
        slides.append(SlideEntry(
            slide_id=s.get("slide_id", f"{obj['case_id']}_s{i}"),
            image=image,
            mpp=float(s["mpp"]),
            magnification=float(s["magnification"]),
        ))
    labels = obj.get("labels")
    if labels:
        if "subtype" in labels and labels["subtype"] not in _SUBTYPES:
            raise ConfigError(f"unknown subtype label {labels['subtype']!r}")
        if "isup_grade" in labels and int(labels["isup_grade"]) not in (1, 2, 3, 4):
            raise ConfigError(f"isup_grade must be 1-4, got {labels['isup_grade']!r}")
    return CaseManifest(case_id=obj["case_id"], slides=slides, labels=labels,
                        source=obj.get("source"))


def load_manifest(path: str | Path) -> list[CaseManifest]:
    """Load a case manifest JSON file: a single case object or {"cases": [...]}."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    base = path.parent
    if isinstance(data, dict) and "cases" in data:
        return [_parse_case(c, base) for c in data["cases"]]
    if isinstance(data, dict):
        return [_parse_case(data, base)]
    raise ConfigError("manifest root must be a case object or {'cases': [...]}")
