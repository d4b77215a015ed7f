"""CLI commands for magnetrec using click."""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any

import click
import torch
from rich.console import Console
from rich.logging import RichHandler

from magnetrec import __version__
from magnetrec.config import resolve_threads
from magnetrec.errors import MagnetError
from magnetrec.formatters import (
    fit_table,
    gradcheck_table,
    metrics_table,
    print_table,
    profile_table,
)
from magnetrec.pipeline import Pipeline, checkpoint_summary
from magnetrec.train import GradientCheckFailedError, GradientScope

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

console = Console()
err_console = Console(stderr=True)

ERROR_RECORD_NAME = "error.json"


def _error_record(error: BaseException, exit_code: int) -> dict[str, Any]:
    return {"error": type(error).__name__, "message": str(error), "exit_code": exit_code}


def _report_failure(error: BaseException, exit_code: int, out_dir: Path | None) -> None:
    record = _error_record(error, exit_code)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / ERROR_RECORD_NAME).write_text(json.dumps(record, indent=2) + "\n")
        except OSError:
            pass
    click.echo(json.dumps(record), err=True)


def handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Map magnetrec errors onto exit codes and leave an ``error.json`` behind."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        out_dir = kwargs.get("out_dir")
        try:
            return func(*args, **kwargs)
        except MagnetError as e:
            err_console.print(f"[red]Error:[/red] {e}")
            _report_failure(e, e.exit_code, out_dir)
            sys.exit(e.exit_code)
        except KeyboardInterrupt as e:
            err_console.print("\n[yellow]Interrupted[/yellow]")
            _report_failure(e, 130, out_dir)
            sys.exit(130)

    return wrapper


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("magnetrec")
    root.handlers.clear()
    root.addHandler(RichHandler(console=err_console, show_path=False, rich_tracebacks=False))
    root.setLevel(logging.DEBUG if verbose else logging.WARNING)


def _pipeline(
    out_dir: Path,
    config_path: Path | None,
    overrides: Sequence[str],
    verbose: bool,
    extra: dict[str, Any],
) -> Pipeline:
    _setup_logging(verbose)
    threads = resolve_threads()
    torch.set_num_threads(threads)
    return Pipeline.from_config_file(
        out_dir,
        config_path,
        overrides,
        {k: v for k, v in extra.items() if v is not None},
        threads=threads,
        console=console,
    )


def common_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Options every subcommand accepts."""
    decorators = [
        click.option(
            "-o",
            "--out",
            "out_dir",
            type=click.Path(file_okay=False, path_type=Path),
            required=True,
            help="Output directory",
        ),
        click.option(
            "-c",
            "--config",
            "config_path",
            type=click.Path(dir_okay=False, path_type=Path),
            help="Flat JSON config (a previous config.resolved.json works)",
        ),
        click.option(
            "--set",
            "overrides",
            multiple=True,
            metavar="KEY=VALUE",
            help="Override a config key (repeatable)",
        ),
        click.option("--seed", type=int, help="Random seed"),
        click.option("-v", "--verbose", is_flag=True, help="Show debug logging"),
    ]
    for decorator in reversed(decorators):
        func = decorator(func)
    return func


def model_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Graph settings, data location, and the ablation switches."""
    decorators = [
        click.option(
            "--data",
            "data_dir",
            type=click.Path(file_okay=False, path_type=Path),
            help="Prepared data directory (default: OUT/data)",
        ),
        click.option("--knn-k", type=int, help="Neighbors per item in each modality index"),
        click.option("--expand-r", type=int, help="Induced items per user"),
        click.option("--single-view", is_flag=True, help="Observed graph only (SV)"),
        click.option("--no-moe", is_flag=True, help="Replace the experts with one fusion head"),
        click.option("--free-templates", is_flag=True, help="Learn expert triplets"),
        click.option("--fixed-step-switch", is_flag=True, help="Switch stage at half of training"),
        click.option(
            "--coverage-only", is_flag=True, help="Keep the coverage stage for the whole run"
        ),
        click.option(
            "--confidence-only", is_flag=True, help="Start and stay in the confidence stage"
        ),
        click.option("--no-view-ctr", is_flag=True, help="Drop the cross-view contrastive term"),
        click.option("--no-routing-reg", is_flag=True, help="Set lambda_r to 0"),
    ]
    for decorator in reversed(decorators):
        func = decorator(func)
    return func


def _model_extra(
    seed: int | None,
    data_dir: Path | None,
    knn_k: int | None,
    expand_r: int | None,
    single_view: bool,
    no_moe: bool,
    free_templates: bool,
    fixed_step_switch: bool,
    coverage_only: bool,
    confidence_only: bool,
    no_view_ctr: bool,
    no_routing_reg: bool,
) -> dict[str, Any]:
    if coverage_only and confidence_only:
        msg = "--coverage-only and --confidence-only are mutually exclusive"
        raise click.UsageError(msg)
    extra: dict[str, Any] = {
        "seed": seed,
        "data_dir": str(data_dir) if data_dir is not None else None,
        "knn_k": knn_k,
        "expand_r": expand_r,
    }
    if single_view:
        extra["view"] = "sv"
    if no_moe:
        extra["use_moe"] = False
    if free_templates:
        extra["free_templates"] = True
    if fixed_step_switch:
        extra["switch_mode"] = "fixed-step"
    if coverage_only:
        extra["routing_regime"] = "coverage-only"
    if confidence_only:
        extra["routing_regime"] = "confidence-only"
    if no_view_ctr:
        extra["view_ctr"] = False
    if no_routing_reg:
        extra["lambda_r"] = 0.0
    return extra


@click.group()
@click.version_option(version=__version__, prog_name="magnet")
def main() -> None:
    """magnet - multimodal mixture-of-experts recommender."""


@main.command()
@common_options
@handle_errors
def synth(
    out_dir: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    seed: int | None,
    verbose: bool,
) -> None:
    """Generate the planted block-structured dataset."""
    pipeline = _pipeline(out_dir, config_path, overrides, verbose, {"seed": seed})
    data = pipeline.synth()
    console.print(
        f"[green]✓[/green] {data.num_users} users, {data.num_items} items, "
        f"{data.num_edges} edges → {out_dir}"
    )


@main.command()
@common_options
@click.option("--interactions", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--features-a", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--features-s", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--knn-k", type=int, help="Neighbors per item in each modality index")
@click.option("--expand-r", type=int, help="Induced items per user")
@click.option("--single-view", is_flag=True, help="Skip the augmented graph")
@handle_errors
def prepare(
    out_dir: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    seed: int | None,
    verbose: bool,
    interactions: Path | None,
    features_a: Path | None,
    features_s: Path | None,
    knn_k: int | None,
    expand_r: int | None,
    single_view: bool,
) -> None:
    """Filter, split, align features, and cache the content graph."""
    extra: dict[str, Any] = {
        "seed": seed,
        "interactions": str(interactions) if interactions else None,
        "features_a": str(features_a) if features_a else None,
        "features_s": str(features_s) if features_s else None,
        "knn_k": knn_k,
        "expand_r": expand_r,
        "view": "sv" if single_view else None,
    }
    pipeline = _pipeline(out_dir, config_path, overrides, verbose, extra)
    data = pipeline.prepare()
    split = data.split
    induced = data.induced.num_edges if data.induced is not None else 0
    console.print(
        f"[green]✓[/green] train {split.train.num_edges}, valid {len(split.valid)}, "
        f"test {len(split.test)} edges; {induced} induced edges"
    )


@main.command()
@common_options
@model_options
@handle_errors
def train(
    out_dir: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    seed: int | None,
    verbose: bool,
    **flags: Any,
) -> None:
    """Train with early stopping and save the best checkpoint."""
    pipeline = _pipeline(out_dir, config_path, overrides, verbose, _model_extra(seed, **flags))
    result = pipeline.train(show_progress=console.is_terminal)
    print_table(fit_table(result), console)
    summary = checkpoint_summary(result.best)
    console.print(
        f"[green]✓[/green] best epoch {summary['epoch']} "
        f"(val NDCG@20 {summary['val_ndcg20']:.4f}) → {out_dir / 'checkpoint'}"
    )


@main.command()
@common_options
@model_options
@click.option("--split", type=click.Choice(["valid", "test"]), default="test", show_default=True)
@click.option(
    "--checkpoint",
    "checkpoint_dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Checkpoint directory (default: OUT/checkpoint)",
)
@click.option("--per-user", is_flag=True, help="Also write per_user.csv")
@handle_errors
def evaluate(
    out_dir: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    seed: int | None,
    verbose: bool,
    split: str,
    checkpoint_dir: Path | None,
    per_user: bool,
    **flags: Any,
) -> None:
    """Full-catalog Recall/NDCG of a checkpoint against popularity."""
    pipeline = _pipeline(out_dir, config_path, overrides, verbose, _model_extra(seed, **flags))
    result = pipeline.evaluate(split, checkpoint_dir, per_user)
    print_table(metrics_table(result), console)


@main.command()
@common_options
@model_options
@click.option("--split", type=click.Choice(["valid", "test"]), default="test", show_default=True)
@click.option(
    "--checkpoint",
    "checkpoint_dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Checkpoint directory (default: OUT/checkpoint)",
)
@handle_errors
def diagnose(
    out_dir: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    seed: int | None,
    verbose: bool,
    split: str,
    checkpoint_dir: Path | None,
    **flags: Any,
) -> None:
    """Dataset-level routing profile of a checkpoint."""
    pipeline = _pipeline(out_dir, config_path, overrides, verbose, _model_extra(seed, **flags))
    profile = pipeline.diagnose(split, checkpoint_dir)
    print_table(profile_table(profile), console)


def _parse_corrupt(
    ctx: click.Context, param: click.Parameter, value: str | None
) -> tuple[str, int] | None:
    del ctx, param
    if value is None:
        return None
    name, sep, index = value.rpartition(":")
    if not sep or not name or not index.isdigit():
        msg = f"expected NAME:INDEX, got '{value}'"
        raise click.BadParameter(msg)
    return name, int(index)


@main.command()
@common_options
@click.option(
    "--scope",
    "scopes",
    type=click.Choice([s.value for s in GradientScope]),
    multiple=True,
    help="Objective to check (repeatable; default: all)",
)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option(
    "--corrupt",
    callback=_parse_corrupt,
    metavar="NAME:INDEX",
    help="Offset one analytic gradient coordinate by +1",
)
@handle_errors
def gradcheck(
    out_dir: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    seed: int | None,
    verbose: bool,
    scopes: tuple[str, ...],
    tolerance: float,
    corrupt: tuple[str, int] | None,
) -> None:
    """Compare analytic and finite-difference gradients on a micro model."""
    pipeline = _pipeline(out_dir, config_path, overrides, verbose, {"seed": seed})
    chosen = [GradientScope(s) for s in scopes] or list(GradientScope)
    reports = pipeline.gradcheck(chosen, tolerance, corrupt)
    print_table(gradcheck_table(reports), console)
    failed = [r for r in reports if not r.passed]
    if failed:
        raise GradientCheckFailedError(failed[0])
    console.print("[green]✓[/green] analytic gradients match finite differences")


def run_command(argv: Sequence[str]) -> int:
    """Run one subcommand and return its exit code instead of exiting."""
    try:
        rv = main.main(args=list(argv), prog_name="magnet", standalone_mode=False)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    except click.exceptions.Abort:
        return 130
    except click.ClickException as e:
        e.show()
        return e.exit_code
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    main()
