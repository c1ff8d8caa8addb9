"""Command-line entry point: ``twolevel run|sweep|validate CONFIG``."""
from __future__ import annotations

import json
import sys

import click

from . import experiments
from .errors import (ConfigError, ConvergenceFailure, DegenerateWeights, InvalidParameters,
                     PrecisionLoss, RegimeHypothesisViolated, UnsupportedRateShape, WindowTooLate)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_NUMERIC = (ConvergenceFailure, PrecisionLoss, DegenerateWeights, WindowTooLate,
            RegimeHypothesisViolated)


def _guarded(fn):
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (InvalidParameters, UnsupportedRateShape) as exc:
        click.echo(f"invalid parameters: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except _NUMERIC as exc:
        click.echo(f"numerical failure ({type(exc).__name__}): {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    sys.exit(EXIT_OK)


_config = click.option("--config", "config_path", required=True,
                       type=click.Path(dir_okay=False), help="YAML experiment file.")
_out = click.option("--out", "out_dir", default=None, help="Output directory (default: config 'output').")
_seed = click.option("--seed-override", type=int, default=None, help="Replace the config seed.")
_threads = click.option("--threads", type=int, default=1, show_default=True,
                        help="Recorded in the manifest; replicates run sequentially.")


@click.group()
@click.version_option(experiments.__version__, prog_name="twolevel")
def main():
    """Two-level selection models: PDE, QSDs, regimes, IBM and diffusion simulators."""


def _execute(fn, config_path, out_dir, seed_override, threads):
    def go():
        cfg = experiments.load_config(config_path)
        man = fn(cfg, out_dir, seed_override, threads)
        click.echo(man["summary"])
        click.echo(f"wrote {len(man['files'])} files + manifest.json")
    _guarded(go)


@main.command()
@_config
@_out
@_seed
@_threads
def run(config_path, out_dir, seed_override, threads):
    """Run one experiment."""
    _execute(experiments.run, config_path, out_dir, seed_override, threads)


@main.command()
@_config
@_out
@_seed
@_threads
def sweep(config_path, out_dir, seed_override, threads):
    """Run a parameter scan (config kind: scan)."""
    _execute(experiments.sweep, config_path, out_dir, seed_override, threads)


@main.command()
@_config
def validate(config_path):
    """Check a config without running it."""
    def go():
        cfg = experiments.load_config(config_path)
        click.echo(json.dumps({"kind": cfg["kind"], "valid": True}))
    _guarded(go)


if __name__ == "__main__":
    main()
