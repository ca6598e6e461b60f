"""Command-line surface: fixture generation and training/export."""

import json
import sys
from pathlib import Path

import click

from .errors import TrainerError
from .fixtures import FixtureSpec, generate_fixtures
from .train import ScheduleParams, train_and_export


@click.group()
def main():
    """Synthetic fixture generation and toy classifier training."""


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def fixturegen(spec_path, out_dir):
    """Generate a labeled fixture dataset from a JSON spec."""
    try:
        spec = FixtureSpec.from_json(Path(spec_path).read_text())
        out = generate_fixtures(spec, out_dir)
    except (TrainerError, KeyError, json.JSONDecodeError) as exc:
        raise click.exceptions.UsageError(str(exc))
    click.echo(f"dataset written to {out}")


@main.command()
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--task", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epochs", default=30, type=int)
@click.option("--lr0", default=0.1, type=float)
@click.option("--decay-rate", default=0.9, type=float)
@click.option("--decay-steps", default=50, type=int)
@click.option("--staircase", is_flag=True, default=False)
@click.option("--seed", default=0, type=int)
def train(dataset_dir, task, out_path, epochs, lr0, decay_rate, decay_steps,
          staircase, seed):
    """Train a toy classifier and export model + sidecar."""
    schedule = ScheduleParams(lr0=lr0, decay_rate=decay_rate,
                              decay_steps=decay_steps, staircase=staircase)
    try:
        summary = train_and_export(dataset_dir, task, out_path, schedule=schedule,
                                   epochs=epochs, seed=seed)
    except TrainerError as exc:
        click.echo(f"training failed: {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps(summary, sort_keys=True, indent=2))


if __name__ == "__main__":
    main()
