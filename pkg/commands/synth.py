# commands/synth.py
"""
TriggerTune - Synth Command
Generate the synthetic corpus: features plus the four manifests
"""
import logging

import click

from commands.common import render_rows
from dependencies import get_experiment_config, get_synth_service

logger = logging.getLogger(__name__)


@click.command("synth")
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), default=None,
              help="Experiment INI file whose [synth] section describes the corpus")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: [paths] data_dir); must not exist or be empty")
def synth(spec_path, out_dir):
    """
    Write a deterministic synthetic corpus

    Example:
        python main.py synth --spec configs/desk.ini --out data/synth
    """
    cfg = get_experiment_config(spec_path)
    service = get_synth_service(spec_path)
    corpus = service.gen_corpus()
    manifests = service.write_corpus(corpus, out_dir or cfg.paths.data_dir)
    render_rows(
        "Synthetic corpus",
        ("Source", "Utterances", "Manifest"),
        [(source, len(utts), manifests[source]) for source, utts in corpus.sources().items()],
    )
