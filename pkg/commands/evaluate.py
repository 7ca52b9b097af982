# commands/evaluate.py
"""
TriggerTune - Evaluation Command
Repeated-enrollment protocol with calibrated, fused scorers
"""
import click

from commands.common import config_option, console, render_report, runs_dir_option
from dependencies import get_experiment_service


@click.command("eval")
@config_option
@runs_dir_option
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--mu", "mu_values", type=click.FloatRange(0.0, 1.0), multiple=True,
              help="Fusion weight; repeat for a sweep (default: [inference] mu_values)")
def evaluate(config_path, runs_dir, checkpoint, mu_values):
    """
    Score the evaluation speakers and write DET files

    Example:
        python main.py eval --checkpoint runs/finetune-.../finetune.ckpt --mu 0 --mu 1
    """
    outcome = get_experiment_service(config_path, runs_dir).evaluate(checkpoint, list(mu_values) or None)
    render_report(outcome.report)
    console.print(f"outputs in [bold]{outcome.run_dir}[/bold]")
