import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from rccpipe.cli import main
from rccpipe.config import load_config, load_manifest
from rccpipe.pipeline import ingest_slide, run_pipeline

from conftest import STAIN, WHITE, flat_slide, write_lookup_descriptor, write_stub_descriptor

PATCH = 512
MPP = 0.5
PATCH_AREA = (PATCH * MPP / 1000.0) ** 2  # mm^2


def build_workspace(tmp_path, image=None, labels=None, workers=1):
    """Write slide image, model descriptors, config, and manifest; return paths."""
    if image is None:
        # left half tissue, right half background; tumor = top-left quadrant
        image = flat_slide(2048, 2048, WHITE, rects=[(0, 0, 1024, 2048, STAIN)])
    img_path = tmp_path / "slide.png"
    Image.fromarray(image).save(img_path)

    tumor_entries = [((0, x, y), [0.1, 0.9])
                     for x in (0, 512) for y in (0, 512)]
    tumor_desc = write_lookup_descriptor(tmp_path, "tumor2", tumor_entries,
                                         default=[0.9, 0.1], name="tumor_oracle")
    subtype_desc = write_stub_descriptor(tmp_path, "subtype3", "constant",
                                         params={"values": [0.7, 0.2, 0.1]},
                                         name="subtype_stub", input_size=64)
    g4_desc = write_stub_descriptor(tmp_path, "g4binary", "constant",
                                    params={"values": [0.8, 0.2]},
                                    name="g4_stub", input_size=64)
    grade3_desc = write_stub_descriptor(tmp_path, "grade3", "constant",
                                        params={"values": [0.5, 0.3, 0.2]},
                                        name="grade3_stub", input_size=64)

    config_path = tmp_path / "pipeline.toml"
    config_path.write_text(f"""
[paths]
pyramid_store = "store"
output_dir = "out"

[models]
tumor = "{tumor_desc.name}"
subtype = "{subtype_desc.name}"
g4 = "{g4_desc.name}"
grade3 = "{grade3_desc.name}"

[detection]
patch_size = {PATCH}

[subtype]
patch_size = {PATCH}

[grade]
patch_size = {PATCH}

[runtime]
workers = {workers}
""")

    manifest_path = tmp_path / "cases.json"
    case = {"case_id": "caseA",
            "slides": [{"slide_id": "s1", "image": img_path.name,
                        "mpp": MPP, "magnification": 40}]}
    if labels is not None:
        case["labels"] = labels
    manifest_path.write_text(json.dumps(case))
    return config_path, manifest_path


def run_workspace(tmp_path, **kw):
    config_path, manifest_path = build_workspace(tmp_path, **kw)
    config = load_config(config_path)
    manifests = load_manifest(manifest_path)
    return run_pipeline(config, manifests), config


class TestFullRun:
    def test_metrics_from_planted_tumor(self, tmp_path):
        result, config = run_workspace(tmp_path)
        assert result.failed == 0
        report = result.reports[0]
        assert report.metrics.tissue_area == pytest.approx(8 * PATCH_AREA)
        assert report.metrics.tumor_area == pytest.approx(4 * PATCH_AREA)
        assert report.metrics.tumor_fraction == pytest.approx(0.5)

    def test_subtype_and_grade_sections(self, tmp_path):
        result, _ = run_workspace(tmp_path)
        report = result.reports[0]
        assert report.subtype.slide_label == "ccRCC"
        assert report.subtype.patch_counts == [4, 0, 0]
        assert report.subtype.proportions == pytest.approx([1.0, 0.0, 0.0])
        # constant g4 stub stays below the 0.5 dichotomy threshold
        assert report.grade.g4_fraction == 0.0
        assert report.grade.slide_grade == 1
        assert report.grade.grade_percentages == pytest.approx([0.5, 0.3, 0.2, 0.0])

    def test_artifacts_written(self, tmp_path):
        result, config = run_workspace(tmp_path)
        out_dir = config.output_dir / "caseA" / "s1"
        for name in ("report.json", "report.txt", "thumbnail.png", "tumor_heatmap.png",
                     "subtype_heatmap.png", "grade_heatmap.png", "summary_figure.png",
                     "patches.jsonl", "triage_audit.jsonl"):
            assert (out_dir / name).is_file(), name
        assert (config.output_dir / "run_summary.json").is_file()
        assert (config.output_dir / "summary.csv").is_file()

    def test_ground_truth_comparison(self, tmp_path):
        result, _ = run_workspace(tmp_path, labels={"subtype": "ccRCC", "isup_grade": 1})
        cmp_ = result.reports[0].ground_truth_comparison
        assert cmp_["subtype"]["match"] is True
        assert cmp_["isup_grade"]["match"] is True

    def test_patch_records_jsonl(self, tmp_path):
        result, config = run_workspace(tmp_path)
        lines = (config.output_dir / "caseA" / "s1" / "patches.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        stages = {r["stage"] for r in records}
        assert stages == {"detect", "subtype", "grade"}
        assert sum(r["stage"] == "detect" for r in records) == 8

    def test_summary_csv_row(self, tmp_path):
        result, config = run_workspace(tmp_path)
        rows = (config.output_dir / "summary.csv").read_text().splitlines()
        assert rows[0].startswith("case_id,slide_id,status")
        assert rows[1].startswith("caseA,s1,ok,")
        assert ",ccRCC," in rows[1]


class TestDeterminism:
    def test_two_runs_byte_identical(self, tmp_path):
        result1, config = run_workspace(tmp_path)
        report_path = config.output_dir / "caseA" / "s1" / "report.json"
        first = report_path.read_bytes()
        config_path = tmp_path / "pipeline.toml"
        run_pipeline(load_config(config_path), load_manifest(tmp_path / "cases.json"))
        assert report_path.read_bytes() == first

    def test_worker_count_invariance(self, tmp_path):
        outputs = []
        for workers in (1, 4):
            sub = tmp_path / f"w{workers}"
            sub.mkdir()
            _, config = run_workspace(sub, workers=workers)
            outputs.append((config.output_dir / "caseA" / "s1" / "report.json").read_bytes())
        # config digests differ (worker count is in the config), so compare the
        # diagnostic payload instead of raw bytes
        a, b = (json.loads(o) for o in outputs)
        a["provenance"].pop("config_digest")
        b["provenance"].pop("config_digest")
        assert a == b


class TestStagesAndFlags:
    def test_detect_stage_skips_downstream(self, tmp_path):
        config_path, manifest_path = build_workspace(tmp_path)
        result = run_pipeline(load_config(config_path), load_manifest(manifest_path),
                              stage="detect")
        report = result.reports[0]
        assert report.subtype is None and report.grade is None

    def test_zero_tissue_flag(self, tmp_path):
        result, _ = run_workspace(tmp_path, image=flat_slide(2048, 2048, WHITE))
        report = result.reports[0]
        assert "zero_tissue_review" in report.flags
        assert report.metrics.tissue_area == 0.0
        assert report.subtype is None

    def test_no_tumor_flag(self, tmp_path):
        # tissue present but the lookup default says non-tumor everywhere
        image = flat_slide(2048, 2048, WHITE, rects=[(1024, 0, 1024, 2048, STAIN)])
        result, _ = run_workspace(tmp_path, image=image)
        report = result.reports[0]
        assert "no_tumor_detected" in report.flags
        assert report.metrics.tumor_area == 0.0


class TestFaultIsolation:
    def test_bad_slide_does_not_abort_cohort(self, tmp_path):
        config_path, manifest_path = build_workspace(tmp_path)
        cases = {"cases": [
            json.loads(manifest_path.read_text()),
            {"case_id": "caseB",
             "slides": [{"slide_id": "broken", "image": "missing.png",
                         "mpp": MPP, "magnification": 40}]},
        ]}
        manifest_path.write_text(json.dumps(cases))
        result = run_pipeline(load_config(config_path), load_manifest(manifest_path))
        assert result.failed == 1
        by_id = {o.slide_id: o for o in result.outcomes}
        assert by_id["s1"].status == "ok"
        assert by_id["broken"].status == "failed"
        assert "broken" in json.loads((load_config(config_path).output_dir /
                                       "run_summary.json").read_text())["slides"][1]["slide_id"]


class TestIngestCache:
    def test_cache_reused(self, tmp_path):
        config_path, manifest_path = build_workspace(tmp_path)
        config = load_config(config_path)
        config.pyramid_store.mkdir(parents=True, exist_ok=True)
        case = load_manifest(manifest_path)[0]
        p1 = ingest_slide(config, case, case.slides[0])
        dirs = list(config.pyramid_store.iterdir())
        assert len(dirs) == 1
        p2 = ingest_slide(config, case, case.slides[0])
        assert list(config.pyramid_store.iterdir()) == dirs
        assert np.array_equal(p1.levels[0].pixels, p2.levels[0].pixels)


class TestCliRun:
    def test_run_command_end_to_end(self, tmp_path):
        config_path, manifest_path = build_workspace(tmp_path)
        result = CliRunner().invoke(main, ["run", "--config", str(config_path),
                                           "--manifest", str(manifest_path)])
        assert result.exit_code == 0, result.output
        assert "ok     caseA/s1" in result.output
        report = json.loads((tmp_path / "out" / "caseA" / "s1" / "report.json").read_text())
        assert report["schema_version"] == 1
        assert report["metrics"]["tumor_fraction"] == pytest.approx(0.5)

    def test_out_override(self, tmp_path):
        config_path, manifest_path = build_workspace(tmp_path)
        alt = tmp_path / "elsewhere"
        result = CliRunner().invoke(main, ["run", "--config", str(config_path),
                                           "--manifest", str(manifest_path),
                                           "--out", str(alt)])
        assert result.exit_code == 0, result.output
        assert (alt / "caseA" / "s1" / "report.json").is_file()
