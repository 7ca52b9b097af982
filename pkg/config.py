# config.py
import os
from dotenv import load_dotenv

import torch

# Load environment variables
load_dotenv()

class Config:
    """Process-level settings for TriggerTune (experiment knobs live in the INI config)"""

    # Application Settings
    APP_NAME = "TriggerTune"
    APP_VERSION = "1.0.0"

    # Output Configuration (unset: [paths] runs_dir of the experiment file)
    RUNS_DIR = os.getenv("TRIGGERTUNE_RUNS_DIR")
    LOG_LEVEL = os.getenv("TRIGGERTUNE_LOG_LEVEL", "INFO").upper()

    # Numerics
    NUM_THREADS = int(os.getenv("TRIGGERTUNE_NUM_THREADS", "1"))
    DETERMINISTIC = os.getenv("TRIGGERTUNE_DETERMINISTIC", "true").lower() == "true"
    DEFAULT_DTYPE = torch.float64

    # Default experiment file used when a command gets no --config
    DEFAULT_EXPERIMENT_CONFIG = os.getenv("TRIGGERTUNE_CONFIG", "configs/desk.ini")

    @classmethod
    def apply_torch_settings(cls):
        """Apply thread count, dtype and determinism to the torch runtime"""
        torch.set_num_threads(max(1, cls.NUM_THREADS))
        torch.set_default_dtype(cls.DEFAULT_DTYPE)
        torch.use_deterministic_algorithms(cls.DETERMINISTIC)
