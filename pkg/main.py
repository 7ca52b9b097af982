# main.py
"""
TriggerTune - Command-Line Application
Speaker-adapted voice trigger detection: corpus synthesis, training, evaluation and ablations
"""
import logging

import click
from rich.logging import RichHandler

# Import commands
from commands import ablate, evaluate, synth, train
from config import Config
from utils.errors import DivergenceError, TriggerTuneError

logger = logging.getLogger("triggertune")


def setup_logging(level: str) -> None:
    """Route library logging through rich"""
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False, markup=False)],
        force=True,
    )


class TriggerTuneGroup(click.Group):
    """Command group mapping TriggerTune failures onto exit codes"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except DivergenceError as e:
            logger.error("training diverged: %s", e)
            for key, value in e.diagnostics.items():
                logger.error("  %s = %s", key, value)
            ctx.exit(e.exit_code)
        except TriggerTuneError as e:
            logger.error("%s: %s", type(e).__name__, e)
            ctx.exit(e.exit_code)


@click.group(cls=TriggerTuneGroup)
@click.version_option(Config.APP_VERSION, prog_name=Config.APP_NAME)
@click.option("--log-level", default=Config.LOG_LEVEL, show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level: str):
    """TriggerTune: speaker-adapted voice trigger detection experiments"""
    setup_logging(log_level.upper())
    Config.apply_torch_settings()


cli.add_command(synth.synth)
cli.add_command(train.train_baseline)
cli.add_command(train.finetune)
cli.add_command(evaluate.evaluate)
cli.add_command(ablate.ablate)
cli.add_command(ablate.reproduce)


if __name__ == "__main__":
    cli()
