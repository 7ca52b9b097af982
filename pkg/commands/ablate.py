# commands/ablate.py
"""
TriggerTune - Ablation and Reproduction Commands
"""
import click

from commands.common import config_option, console, pct, render_mapping, render_rows, runs_dir_option
from dependencies import get_experiment_service


@click.command("ablate")
@config_option
@runs_dir_option
@click.option("--seed", "seeds", type=int, multiple=True, help="Repeatable (default: [seeds] reproduce)")
def ablate(config_path, runs_dir, seeds):
    """Train and evaluate every row of the ablation grid"""
    service = get_experiment_service(config_path, runs_dir)
    outcome = service.ablate(list(seeds) or None)
    render_rows(
        "Ablation (median FRR over seeds)",
        ("Row", "Init", "Encoder", "Losses", "Tap", "S_ctc", "S_metric", "Seeds", "Hash"),
        [
            (
                row.variant.name, row.variant.init, row.variant.encoder, ",".join(sorted(row.variant.active)),
                row.variant.tap_layer(service.cfg), pct(row.median("ctc")), pct(row.median("metric")),
                ",".join(str(s) for s in row.seeds), row.row_hash[:8],
            )
            for row in outcome.rows
        ],
    )
    console.print(f"outputs in [bold]{outcome.run_dir}[/bold]")


@click.command("reproduce")
@config_option
@runs_dir_option
@click.option("--seed", "seeds", type=int, multiple=True, help="Repeatable (default: [seeds] reproduce)")
def reproduce(config_path, runs_dir, seeds):
    """Baseline, fine-tune and evaluate per seed; report medians and the directional checks"""
    outcome = get_experiment_service(config_path, runs_dir).reproduce(list(seeds) or None)
    render_rows(
        "Median FRR over seeds",
        ("Scorer", "Median", "Per seed"),
        [
            (name, pct(value), " ".join(pct(outcome.per_seed[s][name]) for s in outcome.per_seed))
            for name, value in outcome.medians.items()
        ],
    )
    render_mapping("Checks", {name: "pass" if ok else "[red]fail[/red]" for name, ok in outcome.checks.items()})
    console.print(f"outputs in [bold]{outcome.run_dir}[/bold]")
