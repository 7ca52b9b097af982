# commands/train.py
"""
TriggerTune - Training Commands
train-baseline and finetune
"""
import click

from commands.common import config_option, render_mapping, runs_dir_option
from dependencies import get_experiment_service


@click.command("train-baseline")
@config_option
@runs_dir_option
@click.option("--seed", type=int, default=None, help="Overrides [seeds] train")
def train_baseline(config_path, runs_dir, seed):
    """Train the speaker-independent baseline (phone + phrase losses)"""
    outcome = get_experiment_service(config_path, runs_dir).train_baseline(seed)
    render_mapping("Baseline", {
        "run directory": outcome.run_dir,
        "checkpoint": outcome.checkpoint,
        "steps": outcome.summary["steps"],
        "final epoch loss": f"{outcome.summary['epoch_losses'][-1]:.4f}",
        "phoneme accuracy": f"{outcome.summary['phoneme_accuracy']:.3f}",
        "checkpoint sha256": outcome.summary["checkpoint_sha256"][:16],
    })


@click.command("finetune")
@config_option
@runs_dir_option
@click.option("--baseline", "baseline_path", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Baseline checkpoint (default: [paths] baseline_checkpoint)")
@click.option("--seed", type=int, default=None, help="Overrides [seeds] finetune")
def finetune(config_path, runs_dir, baseline_path, seed):
    """Fine-tune the decoder on mixed speaker-ID / voice-trigger batches"""
    outcome = get_experiment_service(config_path, runs_dir).finetune(baseline_path, seed)
    render_mapping("Fine-tune", {
        "run directory": outcome.run_dir,
        "checkpoint": outcome.checkpoint,
        "steps": outcome.summary["steps"],
        "tap layer": outcome.summary["tap_layer"],
        "metric a, b": f"{outcome.summary['metric_a']:.4f}, {outcome.summary['metric_b']:.4f}",
        "encoder sha256": outcome.summary["encoder_sha256"][:16],
    })
