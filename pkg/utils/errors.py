# utils/errors.py
"""
TriggerTune - Error Types
Every failure carries the process exit code the CLI reports for it
"""


class TriggerTuneError(Exception):
    """Base class for all TriggerTune failures"""
    exit_code = 1


class ConfigError(TriggerTuneError, ValueError):
    """Invalid or inconsistent configuration (usage error)"""
    exit_code = 1


class DataError(TriggerTuneError, ValueError):
    """Missing, malformed or insufficient data"""
    exit_code = 2


class UnalignableLabelsError(DataError):
    """Label sequence cannot be aligned to the available frames under CTC rules"""

    def __init__(self, label_length: int, required_frames: int, frames: int):
        self.label_length = label_length
        self.required_frames = required_frames
        self.frames = frames
        super().__init__(
            f"unalignable: {label_length} labels need at least {required_frames} frames, got {frames}"
        )


class CheckpointError(DataError):
    """Checkpoint file is corrupt or incompatible with the configuration"""


class NumericalError(TriggerTuneError, ArithmeticError):
    """Non-finite values or numerically undefined operations"""
    exit_code = 3


class ZeroNormEmbeddingError(NumericalError):
    """Cosine similarity requested for a zero-norm embedding"""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss or gradient"""

    def __init__(self, message: str, diagnostics: dict = None):
        self.diagnostics = diagnostics or {}
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)
