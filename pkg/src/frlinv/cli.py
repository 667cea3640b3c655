"""Command-line entry point: ``frlinv <subcommand> [--config PATH] [--seed N] [--out DIR] [--deterministic]``."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from frlinv.errors import ConfigError, NumericError
from frlinv.experiments.config import ExperimentConfig, default_config
from frlinv.experiments.pipelines import run_experiment
from frlinv.experiments.report import emit_report, parse_csv, rows_to_csv, summarize

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# Subcommand name -> experiment tag.
COMMANDS = {
    "train": "train",
    "attack": "attack",
    "ablate": "ablation",
    "sensitivity": "sensitivity",
    "defense-sweep": "defense",
    "batch-sweep": "batch",
    "multistart": "multistart",
    "prior-study": "prior",
    "transition-study": "transition",
    "quantize-study": "quantization",
}


def load_config(tag: str, path: str | None, seed: int | None, out: str | None, env: str | None) -> ExperimentConfig:
    """Config from ``path`` (or the tag's default), with CLI overrides applied."""
    if path:
        cfg = ExperimentConfig.load(path)
        if cfg.tag != tag:
            raise ConfigError(f"config tag {cfg.tag!r} does not match subcommand ({tag!r})")
        if env:
            raise ConfigError("--env cannot be combined with --config")
    else:
        cfg = default_config(tag, env or "gridlake")
    changes = {}
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed must be non-negative")
        # A trend experiment keeps its seed count but starts from the given seed.
        changes["seeds"] = tuple(range(seed, seed + len(cfg.seeds)))
    if out:
        changes["out_dir"] = out
    return replace(cfg, **changes) if changes else cfg


def _run(tag: str, config: str | None, seed: int | None, out: str | None, deterministic: bool, env: str | None):
    cfg = load_config(tag, config, seed, out, env)
    report = run_experiment(cfg)
    out_dir = Path(cfg.out_dir)
    paths = emit_report(report, out_dir, deterministic=deterministic)
    (out_dir / f"{report.tag}_config.json").write_text(cfg.to_json() + "\n")
    for p in paths:
        click.echo(str(p))


def _guard(fn, *args):
    try:
        fn(*args)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (NumericError, FloatingPointError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Gradient-inversion lab for federated Q-learning."""


def _make_command(name: str, tag: str):
    @main.command(name, help=f"Run the '{tag}' experiment and write its reports.")
    @click.option("--config", "config", type=click.Path(), default=None, help="JSON experiment config.")
    @click.option("--seed", type=int, default=None, help="First experiment seed.")
    @click.option("--out", type=click.Path(), default=None, help="Output directory.")
    @click.option("--deterministic", is_flag=True, help="Omit timing columns so reruns are byte-identical.")
    @click.option("--env", type=click.Choice(["gridlake", "pointmass", "pixelgrid"]), default=None,
                  help="Environment for the default config (ignored with --config).")
    def cmd(config, seed, out, deterministic, env):
        _guard(_run, tag, config, seed, out, deterministic, env)

    return cmd


for _name, _tag in COMMANDS.items():
    _make_command(_name, _tag)


@main.command("report")
@click.option("--config", "config", type=click.Path(), default=None, help="Unused; accepted for symmetry.")
@click.option("--seed", type=int, default=None, help="Unused; accepted for symmetry.")
@click.option("--out", type=click.Path(), default=None, help="Where to write the summary (default: next to CSV).")
@click.option("--deterministic", is_flag=True, help="Drop timing columns from the summary.")
@click.argument("csv_path", type=click.Path())
def report_cmd(config, seed, out, deterministic, csv_path):
    """Re-summarise a report CSV into canonical CSV plus JSON mean/std per arm."""

    def go():
        path = Path(csv_path)
        if not path.is_file():
            raise ConfigError(f"no such report: {path}")
        columns, rows = parse_csv(path.read_text())
        if not columns:
            raise ConfigError(f"{path} is empty")
        ident = {"experiment", "arm", "x", "seed", "config_hash", "version"}
        metrics = [c for c in columns if c not in ident and not (deterministic and c == "wall_time")]
        tag = rows[0]["experiment"] if rows else path.stem
        dest = Path(out) if out else path.parent
        dest.mkdir(parents=True, exist_ok=True)
        summary = summarize(rows, metrics, tag=tag, config_hash=rows[0]["config_hash"] if rows else "")
        keep = [c for c in columns if not (deterministic and c == "wall_time")]
        (dest / f"{path.stem}.canonical.csv").write_text(rows_to_csv(keep, rows))
        (dest / f"{path.stem}.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        click.echo(str(dest / f"{path.stem}.summary.json"))

    _guard(go)


if __name__ == "__main__":  # pragma: no cover
    main()
