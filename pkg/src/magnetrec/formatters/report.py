"""Rich tables for evaluation reports, routing profiles, and gradient checks."""

from __future__ import annotations

from typing import TYPE_CHECKING

from rich.console import Console
from rich.table import Table

if TYPE_CHECKING:
    from magnetrec.diagnostics import RoutingProfile
    from magnetrec.pipeline import EvaluationResult
    from magnetrec.train import FitResult, GradientCheckReport


def metrics_table(result: EvaluationResult) -> Table:
    """Model against the popularity baseline at every cutoff."""
    table = Table(title=f"Top-N metrics on {result.split}")
    table.add_column("Ranker", style="cyan")
    for n in result.model.cutoffs:
        table.add_column(f"Recall@{n}", justify="right")
        table.add_column(f"NDCG@{n}", justify="right")
    table.add_column("Users", justify="right")

    for name, report in (("model", result.model), ("popularity", result.popularity)):
        cells: list[str] = []
        for n in report.cutoffs:
            cells.extend([f"{report.recall[n]:.4f}", f"{report.ndcg[n]:.4f}"])
        table.add_row(name, *cells, str(report.num_users))
    return table


def profile_table(profile: RoutingProfile) -> Table:
    table = Table(title="Routing profile")
    table.add_column("Statistic", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in profile.to_row().items():
        table.add_row(key, "-" if value is None else f"{value:.4f}")
    return table


def fit_table(result: FitResult) -> Table:
    """One row per epoch with losses, routing entropy, and validation scores."""
    table = Table(title="Training")
    for column in ("Epoch", "Loss", "BPR", "H_norm", "Stage", "Val R@20", "Val N@20"):
        table.add_column(column, justify="right")
    best = result.best.epoch
    for record in result.history:
        h_norm = record["H_norm"]
        style = "bold green" if record["epoch"] == best else None
        table.add_row(
            str(record["epoch"]),
            f"{record['loss_total']:.4f}",
            f"{record['loss_bpr']:.4f}",
            "-" if h_norm is None else f"{h_norm:.3f}",
            str(record["stage"]),
            f"{record['val_recall20']:.4f}",
            f"{record['val_ndcg20']:.4f}",
            style=style,
        )
    return table


def gradcheck_table(reports: list[GradientCheckReport]) -> Table:
    table = Table(title="Gradient check")
    table.add_column("Scope", style="cyan")
    table.add_column("Parameter")
    table.add_column("Coords", justify="right")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Status")
    for report in reports:
        for name, group in report.groups.items():
            ok = group.max_rel_error < report.tolerance
            status = "[green]✓ ok[/green]" if ok else "[red]✗ failed[/red]"
            table.add_row(
                report.scope.value,
                name,
                str(group.coordinates),
                f"{group.max_rel_error:.2e}",
                status,
            )
    return table


def print_table(table: Table, console: Console | None = None) -> None:
    if console is None:
        console = Console()
    console.print(table)
