# commands/common.py
"""
TriggerTune - Command Helpers
Shared click options and rich renderers for command results
"""
from typing import Dict, Iterable

import click
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from services.evaluation_service import ProtocolReport

console = Console()

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None,
    help="Experiment INI file (default: TRIGGERTUNE_CONFIG or configs/desk.ini)",
)
runs_dir_option = click.option(
    "--runs-dir", type=click.Path(file_okay=False), default=None,
    help="Parent directory for run outputs",
)


def pct(value: float) -> str:
    return f"{100.0 * value:.2f}%"


def render_report(report: ProtocolReport, title: str = "FRR at the operating point") -> None:
    """Per-scorer FRR table in the layout of the results summary"""
    table = Table(title=f"{title} ({report.operating_fa_per_hr:g} FA/hr)")
    table.add_column("Scorer", style="cyan")
    table.add_column("Mean FRR", justify="right")
    table.add_column("Min", justify="right")
    table.add_column("Max", justify="right")
    table.add_column("Per run", justify="left")
    table.add_column("Reached", justify="center")
    for name, summary in report.scorers.items():
        table.add_row(
            name,
            pct(summary.mean_frr),
            pct(min(summary.frrs)),
            pct(max(summary.frrs)),
            " ".join(pct(v) for v in summary.frrs),
            "yes" if summary.all_met else "[yellow]no[/yellow]",
        )
    console.print(table)


def render_mapping(title: str, values: Dict[str, object]) -> None:
    """Key/value panel for command summaries"""
    lines = "\n".join(f"[bold]{key}[/bold]: {value}" for key, value in values.items())
    console.print(Panel(lines, title=title, expand=False))


def render_rows(title: str, columns: Iterable[str], rows: Iterable[Iterable[object]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(str(v) for v in row))
    console.print(table)
