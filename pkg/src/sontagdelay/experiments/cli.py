"""Command line front end.

Exit codes: 0 success, 1 falsified hypothesis / violated bound / divergence,
2 configuration error.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from ..clkf import ClkfError
from ..controller import MODES
from ..dsl import DslError
from ..sim import SimConfigError
from . import runner
from .config import read_config

OUT_DIR_ENV = "SONTAGDELAY_OUT_DIR"

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

CONFIG_ERRORS = (DslError, ClkfError, SimConfigError, runner.ConfigError, ValueError)


def _config_error(exc: Exception):
    click.echo(f"config error:\n{exc}", err=True)
    sys.exit(EXIT_CONFIG)


def _load(path: str, **overrides):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        _config_error(exc)
    try:
        return read_config(text).with_overrides(**overrides)
    except CONFIG_ERRORS as exc:
        _config_error(exc)


def _output_path(explicit: str | None, cfg, default: str) -> Path:
    name = explicit or cfg.settings.out or default
    path = Path(name)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _common(fn):
    fn = click.option("--seed", type=int, help="Override the seed.")(fn)
    fn = click.option("--step", type=float, help="Override the integration step.")(fn)
    fn = click.option("--horizon", type=float, help="Override the horizon T.")(fn)
    fn = click.option("--mode", type=click.Choice(MODES), help="Override the controller mode.")(fn)
    fn = click.option("--q", "q", type=float, help="Override the ISS redesign gain q.")(fn)
    fn = click.option("--out", type=str, help=f"Output file (relative paths go under ${OUT_DIR_ENV}).")(fn)
    fn = click.argument("config", type=click.Path(dir_okay=False))(fn)
    return fn


@click.group()
def main():
    """Sontag-type ISpS stabilizers for retarded control-affine systems."""


@main.command("run")
@_common
def run_cmd(config, out, q, mode, horizon, step, seed):
    """Simulate the closed loop and write the trajectory CSV."""
    cfg = _load(config, q=q, mode=mode, horizon=horizon, step=step, seed=seed)
    try:
        result = runner.run(cfg)
    except CONFIG_ERRORS as exc:
        _config_error(exc)
    path = _output_path(out, cfg, "run.csv")
    with open(path, "w", newline="") as fh:
        runner.write_csv(result.trajectory, fh)
    click.echo(result.summary())
    click.echo(f"wrote {path}")
    sys.exit(EXIT_FAIL if result.bound_ok is False else EXIT_OK)


@main.command("sweep-q")
@_common
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel worker processes.")
def sweep_cmd(config, out, q, mode, horizon, step, seed, jobs):
    """Run one simulation per q in the sweep list; write (q, radius, bound)."""
    cfg = _load(config, q=q, mode=mode, horizon=horizon, step=step, seed=seed)
    try:
        rows = runner.sweep_q(cfg, jobs=jobs)
    except CONFIG_ERRORS as exc:
        _config_error(exc)
    path = _output_path(out, cfg, "sweep.csv")
    with open(path, "w", newline="") as fh:
        runner.write_sweep_csv(rows, fh)
    failed = False
    for row in rows:
        if row.diverged_at is not None:
            click.echo(f"q={row.q:g}: divergence at t={row.diverged_at:.6g}")
            failed = True
        else:
            ok = row.residual_radius <= row.theoretical_bound
            failed |= not ok
            click.echo(
                f"q={row.q:g}: residual_radius={row.residual_radius:.6g} "
                f"bound={row.theoretical_bound:.6g} {'ok' if ok else 'VIOLATED'}"
            )
    click.echo(f"wrote {path}")
    sys.exit(EXIT_FAIL if failed else EXIT_OK)


@main.command("falsify")
@_common
@click.option("--samples", type=int, help="Override the sample count.")
def falsify_cmd(config, out, q, mode, horizon, step, seed, samples):
    """Search random segments for violations of the CLKF conditions."""
    cfg = _load(config, seed=seed, samples=samples)
    try:
        report = runner.falsify(cfg)
    except CONFIG_ERRORS as exc:
        _config_error(exc)
    click.echo(report.render())
    path = _output_path(out, cfg, "counterexamples.csv")
    with open(path, "w", newline="") as fh:
        runner.write_counterexamples_csv(report, fh)
    click.echo(f"wrote {path}")
    sys.exit(EXIT_FAIL if report.falsified else EXIT_OK)


@main.command("selftest")
def selftest_cmd():
    """Run fast built-in numerical checks."""
    from .selftest import run_selftest

    ok = True
    for name, passed, detail in run_selftest():
        ok &= passed
        click.echo(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    sys.exit(EXIT_OK if ok else EXIT_FAIL)


if __name__ == "__main__":
    main()
