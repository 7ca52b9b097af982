# dependencies.py
"""
TriggerTune - Service Dependencies
Cached factories building configuration and services for the command modules
"""
from functools import lru_cache
from typing import Optional

from config import Config
from models.config import ExperimentConfig, load_experiment_config
from services.experiment_service import ExperimentService
from services.synth_service import SynthService


@lru_cache()
def get_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    """
    Load and validate an experiment file (cached per path)

    Args:
        path (str, optional): INI file; defaults to Config.DEFAULT_EXPERIMENT_CONFIG

    Returns:
        ExperimentConfig: Validated configuration
    """
    return load_experiment_config(path or Config.DEFAULT_EXPERIMENT_CONFIG)


@lru_cache()
def get_synth_service(path: Optional[str] = None) -> SynthService:
    return SynthService(get_experiment_config(path).synth)


def get_experiment_service(path: Optional[str] = None, runs_dir: Optional[str] = None) -> ExperimentService:
    """
    Experiment service for one configuration

    Args:
        path (str, optional): INI file
        runs_dir (str, optional): Overrides TRIGGERTUNE_RUNS_DIR and [paths] runs_dir

    Returns:
        ExperimentService: Orchestrates training and evaluation commands
    """
    return ExperimentService(get_experiment_config(path), runs_dir or Config.RUNS_DIR)
