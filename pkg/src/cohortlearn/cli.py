"""Command-line entry points.

Five subcommands share one config format (dotted keys, `=` values, `#`
comments): gen-data, train, eval, sweep, ablate. Exit codes: 0 on success,
2 for configuration or input problems, 3 when training diverges numerically.
"""

import sys

import click

from .config import load_run_config
from .errors import CohortLearnError, ConfigError, DivergenceError
from . import harness


@click.group()
def main():
    """Cohort-aware readmission modeling over longitudinal medical codes."""


def _config_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="Config file (dotted keys).")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Override the output directory.")(fn)
    return fn


def _run(action, config_path, seed, out):
    try:
        config = load_run_config(config_path, seed=seed, out=out)
        action(config)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except DivergenceError as exc:
        click.echo(f"numeric divergence: {exc}", err=True)
        sys.exit(3)
    except CohortLearnError as exc:
        # Bad input data (malformed patient/ontology files, inconsistent
        # labels) is a configuration problem from the caller's side.
        click.echo(f"input error: {exc}", err=True)
        sys.exit(2)


@main.command("gen-data")
@_config_options
def gen_data(config_path, seed, out):
    """Synthesize a dataset: patients.jsonl, ontology.csv, planted.csv."""

    def action(config):
        paths = harness.generate_data_files(config)
        for name, path in sorted(paths.items()):
            click.echo(f"{name}: {path}")

    _run(action, config_path, seed, out)


@main.command("train")
@_config_options
def train(config_path, seed, out):
    """Train a model; writes report.json, cohorts.csv, attention.csv,
    checkpoint.pt, and curves/ under the output directory."""

    def action(config):
        checkpoint, report = harness.run_train(config)
        click.echo(
            f"method={config.method} best_epoch={checkpoint.best_epoch} "
            f"test_auprc={report.auprc:.4f} out={config.out_dir}"
        )

    _run(action, config_path, seed, out)


@main.command("eval")
@_config_options
def eval_cmd(config_path, seed, out):
    """Re-evaluate a saved checkpoint (eval.checkpoint) on the test split."""

    def action(config):
        report = harness.run_eval(config)
        click.echo(f"test_auprc={report.auprc:.4f} out={config.out_dir}")

    _run(action, config_path, seed, out)


@main.command("sweep")
@_config_options
def sweep(config_path, seed, out):
    """Grid runs over sweep.* config lists; writes sweep.csv and curves/."""

    def action(config):
        rows = harness.run_sweep(config)
        ok = sum(1 for row in rows if row["status"] == "ok")
        click.echo(f"{ok}/{len(rows)} runs ok; out={config.out_dir}")

    _run(action, config_path, seed, out)


@main.command("ablate")
@_config_options
def ablate(config_path, seed, out):
    """Run the full model and its three module removals; writes sweep.csv."""

    def action(config):
        rows = harness.run_ablation(config)
        for row in rows:
            click.echo(f"{row['variant']}: auprc={row['auprc']:.4f}")
        click.echo(f"out={config.out_dir}")

    _run(action, config_path, seed, out)


if __name__ == "__main__":
    main()
