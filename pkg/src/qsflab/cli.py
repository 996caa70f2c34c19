"""Command-line interface.

Subcommands: simulate (trajectory-producing tasks), check (verification
tasks), moments, convergence, report.  Exit codes: 0 all checks pass,
1 a check failed, 2 configuration error.  QSFLAB_OUT sets the default
output directory.
"""

from __future__ import annotations

import os
import sys

import click

from .config import apply_overrides, load_config
from .errors import ConfigError, QsfError
from .tasks import consolidate, run

SIMULATE_TASKS = ("pure-linear", "pure-nonlinear", "master-linear",
                  "master-nonlinear", "unravel", "lindblad", "oracle-compare")
CHECK_TASKS = ("dissipativity", "equivalence", "pure-linear", "unravel",
               "oracle-compare", "master-linear", "lindblad")


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="TOML or JSON experiment file")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override run.master_seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="output directory (default: $QSFLAB_OUT or config)")(fn)
    fn = click.option("--parallel", type=int, default=None,
                      help="override run.parallelism")(fn)
    fn = click.option("--dt", type=float, default=None, help="override run.dt")(fn)
    fn = click.option("--T", "horizon", type=float, default=None,
                      help="override run.T")(fn)
    fn = click.option("--trajectories", type=int, default=None,
                      help="override run.trajectories")(fn)
    return fn


def _load(config_path, seed, out, parallel, dt, horizon, trajectories):
    config = load_config(config_path)
    if out is None:
        out = os.environ.get("QSFLAB_OUT")
    return apply_overrides(config, seed=seed, out=out, parallel=parallel,
                           dt=dt, T=horizon, trajectories=trajectories)


def _execute(config, allowed, label):
    if config.task not in allowed:
        raise ConfigError("task", f"task {config.task!r} is not a {label} task")
    manifest, manifest_path = run(config)
    for check in manifest.checks:
        status = "pass" if check["passed"] else "FAIL"
        click.echo(f"[{status}] {config.task}/{check['id']}")
    click.echo(f"manifest: {manifest_path}")
    return 0 if manifest.all_passed else 1


@click.group()
def main():
    """Stochastic filtering simulation laboratory."""


@main.command()
@_common_options
def simulate(config_path, seed, out, parallel, dt, horizon, trajectories):
    """Run a trajectory-producing simulation task."""
    _run_command(config_path, seed, out, parallel, dt, horizon, trajectories,
                 SIMULATE_TASKS, "simulate")


@main.command()
@_common_options
def check(config_path, seed, out, parallel, dt, horizon, trajectories):
    """Run a verification task (dissipativity, equivalence, density identity)."""
    _run_command(config_path, seed, out, parallel, dt, horizon, trajectories,
                 CHECK_TASKS, "check")


@main.command()
@_common_options
def moments(config_path, seed, out, parallel, dt, horizon, trajectories):
    """Estimate propagator-norm moment surrogates over a p grid."""
    _run_command(config_path, seed, out, parallel, dt, horizon, trajectories,
                 ("moments",), "moments", force_task="moments")


@main.command()
@_common_options
def convergence(config_path, seed, out, parallel, dt, horizon, trajectories):
    """Run the truncation-convergence study."""
    _run_command(config_path, seed, out, parallel, dt, horizon, trajectories,
                 ("convergence",), "convergence", force_task="convergence")


def _run_command(config_path, seed, out, parallel, dt, horizon, trajectories,
                 allowed, label, force_task=None):
    try:
        config = _load(config_path, seed, out, parallel, dt, horizon, trajectories)
        if force_task is not None and config.task != force_task:
            raise ConfigError("task", f"expected task {force_task!r}")
        code = _execute(config, allowed, label)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(2)
    except QsfError as exc:
        click.echo(f"task failed: {exc}", err=True)
        sys.exit(1)
    sys.exit(code)


@main.command()
@click.argument("manifests", nargs=-1, type=click.Path())
@click.option("--out", type=click.Path(), default=None,
              help="report directory (default: $QSFLAB_OUT or '.')")
@click.option("--figures/--no-figures", default=True,
              help="render PNG figures next to the delimited outputs")
def report(manifests, out, figures):
    """Consolidate manifests into the acceptance report (with figures)."""
    if out is None:
        out = os.environ.get("QSFLAB_OUT", ".")
    try:
        result = consolidate(list(manifests), out, render_figures=figures)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(2)
    for row in result["checks"]:
        status = "pass" if row["passed"] else "FAIL"
        click.echo(f"[{status}] {row['task']}/{row['check']}")
    click.echo(f"report: {out}/report.txt")
    sys.exit(0 if result["all_passed"] else 1)


if __name__ == "__main__":
    main()
