"""Command-line entry point: ``fedlora run | compare | sweep-editing | validate-config``.

Exit status 0 on success, 2 for usage or configuration errors (including a
missing config file), 1 for IO failures.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import click

from .aggregation import STRATEGIES
from .config import ConfigError, ExperimentConfig, SeedBundle, dump_config, load_config
from .editing import EDIT_MODES
from .fedsim import build_federation, run_experiment
from .telemetry import MetricsWriter, atomic_write, csv_header, format_csv_row, record_row, save_snapshot, summarize

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
log = logging.getLogger("fedlora")


def _setup_logging() -> None:
    name = os.environ.get("FEDLORA_LOG_LEVEL", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise click.UsageError(f"FEDLORA_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("fedlora").setLevel(LOG_LEVELS[name])


def _split(value: str | None) -> list[str]:
    if value is None:
        return []
    return [v.strip() for v in value.split(",") if v.strip()]


def _load(path: str, seed_override: int | None) -> ExperimentConfig:
    try:
        config = load_config(path)
    except FileNotFoundError:
        raise click.UsageError(f"config not found: {path}") from None
    except ConfigError as exc:
        raise click.UsageError(f"invalid config: {exc}") from None
    except OSError as exc:
        raise click.FileError(path, hint=str(exc)) from None
    if seed_override is not None:
        config = config.replace(seeds=SeedBundle.from_single(seed_override))
    return config


def _write_json(path: Path, doc: Any) -> None:
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _run_one(config: ExperimentConfig, out: Path):
    """Full run into ``out``: streamed metrics, config echo and final snapshot."""
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config-echo.json", dump_config(config))
    with MetricsWriter(out, config) as writer:
        result = run_experiment(config, on_record=writer.write, on_start=writer.set_initial_norms)
    save_snapshot(result.state, out / "final_adapters.npz")
    return result


def _guard_io(fn):
    """Convert filesystem failures into a clean nonzero exit."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


config_option = click.option("--config", "config_path", required=True, help="YAML or JSON experiment config.")
out_option = click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
seed_option = click.option("--seed-override", type=int, default=None, help="Use this one seed for every RNG stream.")


@click.group()
def main() -> None:
    """Federated heterogeneous-rank LoRA simulator on a synthetic multimodal task."""
    _setup_logging()


@main.command("validate-config")
@config_option
def validate_config(config_path: str) -> None:
    """Parse and validate a config; print the normalized form."""
    config = _load(config_path, None)
    click.echo(dump_config(config), nl=False)


@main.command()
@config_option
@out_option
@seed_option
@_guard_io
def run(config_path: str, out_dir: str, seed_override: int | None) -> None:
    """Run one experiment and write metrics.csv, metrics.json, config-echo.json, final_adapters.npz."""
    config = _load(config_path, seed_override)
    result = _run_one(config, Path(out_dir))
    s = summarize(result)
    click.echo(f"{config.strategy}: final global loss {s['final_global_loss']!r}, "
               f"personalized {s['final_personalized_loss']!r}")


@main.command()
@config_option
@out_option
@seed_option
@click.option("--strategies", required=True, help=f"Comma-separated subset of {','.join(STRATEGIES)}.")
@_guard_io
def compare(config_path: str, out_dir: str, seed_override: int | None, strategies: str) -> None:
    """Run several strategies on the same seeds; write comparison.csv and summary.json."""
    names = _split(strategies)
    if len(names) < 2:
        raise click.UsageError("compare needs at least 2 strategies")
    seen = set()
    for name in names:
        if name in seen:
            raise click.UsageError(f"duplicate strategy {name!r}")
        if name not in STRATEGIES:
            raise click.UsageError(f"unknown strategy {name!r}; choose from {STRATEGIES}")
        seen.add(name)
    base = _load(config_path, seed_override)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    federation = build_federation(base)
    summary: dict[str, Any] = {"seed_bundle": dict(vars(base.seeds)), "strategies": {}}
    joined = [csv_header()]
    for name in names:
        config = base.replace(strategy=name)
        sub = out / name
        sub.mkdir(exist_ok=True)
        atomic_write(sub / "config-echo.json", dump_config(config))
        with MetricsWriter(sub, config) as writer:
            result = run_experiment(config, federation, on_record=writer.write, on_start=writer.set_initial_norms)
        save_snapshot(result.state, sub / "final_adapters.npz")
        joined.extend(format_csv_row(record_row(r, config)) for r in result.records)
        summary["strategies"][name] = summarize(result)
        click.echo(f"{name}: final global loss {summary['strategies'][name]['final_global_loss']!r}")
    atomic_write(out / "comparison.csv", "".join(joined))
    _write_json(out / "summary.json", summary)


SWEEP_COLUMNS = ("edit_mode", "edit_k", "n_seeds", "mean_final_personalized_loss", "mean_final_global_loss")


@main.command("sweep-editing")
@config_option
@out_option
@seed_option
@click.option("--modes", default="a_only,b_only,both,none", show_default=True, help="Comma-separated edit modes.")
@click.option("--ks", default="1,3", show_default=True, help="Comma-separated Min-k values.")
@click.option("--seeds", "seed_list", default=None, help="Comma-separated seeds; each cell is averaged over them.")
@_guard_io
def sweep_editing(config_path: str, out_dir: str, seed_override: int | None, modes: str, ks: str,
                  seed_list: str | None) -> None:
    """Grid over edit modes and k; one summary row per (mode, k) cell."""
    mode_list = _split(modes)
    if not mode_list:
        raise click.UsageError("--modes is empty")
    for m in mode_list:
        if m not in EDIT_MODES:
            raise click.UsageError(f"unknown edit mode {m!r}; choose from {EDIT_MODES}")
    try:
        k_list = [int(k) for k in _split(ks)]
        seeds = [int(s) for s in _split(seed_list)]
    except ValueError as exc:
        raise click.UsageError(f"expected integers: {exc}") from None
    if not k_list or any(k < 1 for k in k_list):
        raise click.UsageError("--ks must list positive integers")
    if len(set(mode_list)) != len(mode_list) or len(set(k_list)) != len(k_list):
        raise click.UsageError("duplicate entry in --modes or --ks")
    base = _load(config_path, seed_override)
    for k in k_list:
        if k > base.task.n_layers:
            raise click.UsageError(f"k={k} exceeds the number of layers ({base.task.n_layers})")
    bundles = [SeedBundle.from_single(s) for s in seeds] or [base.seeds]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    federations = {}
    rows = []
    for mode in mode_list:
        for k in k_list:
            pers, glob = [], []
            for bundle in bundles:
                config = base.replace(strategy="fedilora", edit_mode=mode, edit_k=k, seeds=bundle)
                if bundle not in federations:
                    federations[bundle] = build_federation(config)
                result = run_experiment(config, federations[bundle])
                pers.append(result.records[-1].personalized_loss if result.records else float("nan"))
                glob.append(result.records[-1].global_loss if result.records else float("nan"))
            row = {
                "edit_mode": mode,
                "edit_k": k,
                "n_seeds": len(bundles),
                "mean_final_personalized_loss": sum(pers) / len(pers),
                "mean_final_global_loss": sum(glob) / len(glob),
            }
            rows.append(row)
            click.echo(f"{mode} k={k}: personalized {row['mean_final_personalized_loss']!r}")
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(v) if isinstance(v, float) else v for c, v in row.items()})
    _write_json(out / "sweep.json", {"seeds": [dict(vars(b)) for b in bundles], "cells": rows})


if __name__ == "__main__":  # pragma: no cover
    main()
