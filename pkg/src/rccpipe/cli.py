"""Command-line surface for the pipeline engine.

Exit codes: 0 success, 1 partial (some slides failed), 2 config or usage error.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import click

from .config import load_config, load_manifest
from .diagnosis import cohens_kappa
from .errors import ConfigError, PipelineError
from .pipeline import ingest_slide, run_pipeline
from .slide import ingest_base_image, load_flat_image
from .stain import estimate_stain_profile
from .slide import Patch


def _load_inputs(config_path, manifest_path, out, workers, seed):
    try:
        config = load_config(config_path)
        manifests = load_manifest(manifest_path)
    except ConfigError as exc:
        raise click.exceptions.UsageError(str(exc))
    updates = {}
    if out is not None:
        updates["output_dir"] = Path(out).resolve()
    if workers is not None:
        updates["workers"] = workers
    if seed is not None:
        updates["seed"] = seed
    if updates:
        config = dataclasses.replace(config, **updates)
    return config, manifests


def _run_stage(stage, config_path, manifest_path, out, workers, seed, force_ingest):
    config, manifests = _load_inputs(config_path, manifest_path, out, workers, seed)
    try:
        result = run_pipeline(config, manifests, stage=stage, force_ingest=force_ingest)
    except PipelineError as exc:
        raise click.exceptions.UsageError(str(exc))
    for o in result.outcomes:
        if o.status == "ok":
            click.echo(f"ok     {o.case_id}/{o.slide_id}  patches={o.patch_count}  "
                       f"trigger_rate={o.trigger_rate:.4f}")
        else:
            click.echo(f"FAILED {o.case_id}/{o.slide_id}  {o.error}", err=True)
    click.echo(f"run summary: {result.summary_path}")
    if result.failed:
        sys.exit(1)


_common = [
    click.option("--config", "config_path", required=True, type=click.Path(exists=False)),
    click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=False)),
    click.option("--out", default=None, help="Override the configured output directory."),
    click.option("--workers", default=None, type=int),
    click.option("--seed", default=None, type=int),
    click.option("--force-ingest", is_flag=True, default=False),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Whole-slide image diagnostic pipeline."""


@main.command()
@common_options
def ingest(config_path, manifest_path, out, workers, seed, force_ingest):
    """Ingest manifest slides into the pyramid store."""
    config, manifests = _load_inputs(config_path, manifest_path, out, workers, seed)
    config.pyramid_store.mkdir(parents=True, exist_ok=True)
    failed = 0
    for case in manifests:
        for slide in case.slides:
            try:
                pyramid = ingest_slide(config, case, slide, force=force_ingest)
                click.echo(f"ok     {case.case_id}/{slide.slide_id}  levels={len(pyramid.levels)}")
            except Exception as exc:
                failed += 1
                click.echo(f"FAILED {case.case_id}/{slide.slide_id}  {exc}", err=True)
    if failed:
        sys.exit(1)


@main.group()
def stain():
    """Stain normalization utilities."""


@stain.command("fit")
@click.option("--reference", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def stain_fit(reference, out_path):
    """Estimate a Macenko stain profile from a reference image."""
    image = load_flat_image(reference)
    patch = Patch(pixels=image, origin=(0, 0, 0), mpp=0.0)
    try:
        profile = estimate_stain_profile(patch)
    except PipelineError as exc:
        raise click.exceptions.UsageError(str(exc))
    profile.save(out_path)
    click.echo(f"stain profile written to {out_path}")


@main.command()
@common_options
def detect(config_path, manifest_path, out, workers, seed, force_ingest):
    """Tumor detection stage only."""
    _run_stage("detect", config_path, manifest_path, out, workers, seed, force_ingest)


@main.command()
@common_options
def subtype(config_path, manifest_path, out, workers, seed, force_ingest):
    """Detection plus subtype classification."""
    _run_stage("subtype", config_path, manifest_path, out, workers, seed, force_ingest)


@main.command()
@common_options
def grade(config_path, manifest_path, out, workers, seed, force_ingest):
    """Detection, subtyping, and grading."""
    _run_stage("grade", config_path, manifest_path, out, workers, seed, force_ingest)


@main.command()
@common_options
def report(config_path, manifest_path, out, workers, seed, force_ingest):
    """Full pipeline and whole-case report generation."""
    _run_stage("run", config_path, manifest_path, out, workers, seed, force_ingest)


@main.command()
@common_options
def run(config_path, manifest_path, out, workers, seed, force_ingest):
    """Full pipeline (alias of report)."""
    _run_stage("run", config_path, manifest_path, out, workers, seed, force_ingest)


@main.command()
@click.option("--a", "file_a", required=True, type=click.Path(exists=True))
@click.option("--b", "file_b", required=True, type=click.Path(exists=True))
def kappa(file_a, file_b):
    """Cohen's kappa between two annotation files (one label per line)."""
    labels_a = Path(file_a).read_text().split()
    labels_b = Path(file_b).read_text().split()
    try:
        value = cohens_kappa(labels_a, labels_b)
    except PipelineError as exc:
        raise click.exceptions.UsageError(str(exc))
    click.echo(f"kappa: {value:.6f}")


if __name__ == "__main__":
    main()
