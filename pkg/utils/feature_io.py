# utils/feature_io.py
"""
TriggerTune - Feature and Audio File I/O
Flat binary feature matrices and single-channel PCM / WAV audio
"""
import struct
import wave
from pathlib import Path
from typing import Union

import numpy as np

from models.config import MelConfig
from utils.errors import DataError
from utils.features import AudioClip, FeatureSequence, log_mel

# Feature file layout: little-endian uint32 rows, uint32 cols, then row-major float32 payload
FEATURE_HEADER = struct.Struct("<II")
FEATURE_DTYPE = np.dtype("<f4")

AUDIO_SUFFIXES = {".wav", ".pcm", ".raw", ".f32"}


def write_features(path: Union[str, Path], frames: np.ndarray) -> Path:
    """
    Write a T x F matrix in the flat binary feature layout

    Example:
        write_features("feats/utt1.feat", np.zeros((98, 40)))
    """
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {frames.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FEATURE_HEADER.pack(*frames.shape))
        f.write(np.ascontiguousarray(frames, dtype=FEATURE_DTYPE).tobytes())
    return path


def read_features(path: Union[str, Path], frame_rate: float = 100.0) -> FeatureSequence:
    """Read a flat binary feature file"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from e
    if len(raw) < FEATURE_HEADER.size:
        raise DataError(f"feature file {path} is truncated")
    rows, cols = FEATURE_HEADER.unpack_from(raw)
    expected = FEATURE_HEADER.size + rows * cols * FEATURE_DTYPE.itemsize
    if len(raw) != expected:
        raise DataError(f"feature file {path} has {len(raw)} bytes, header implies {expected}")
    frames = np.frombuffer(raw, dtype=FEATURE_DTYPE, offset=FEATURE_HEADER.size).reshape(rows, cols)
    return FeatureSequence(frames=frames.astype(np.float64), frame_rate=frame_rate)


def load_audio(path: Union[str, Path], sample_rate: int = 16000) -> AudioClip:
    """
    Load mono audio: 16-bit PCM WAV, raw little-endian int16 (.pcm/.raw) or float32 (.f32)

    Args:
        path (Union[str, Path]): Audio file
        sample_rate (int): Rate assumed for headerless files

    Returns:
        AudioClip: Samples scaled to [-1, 1) for integer input
    """
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".wav":
            with wave.open(str(path), "rb") as w:
                if w.getnchannels() != 1:
                    raise DataError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
                if w.getsampwidth() != 2:
                    raise DataError(f"{path}: only 16-bit PCM WAV is supported")
                samples = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
                return AudioClip(samples.astype(np.float64) / 32768.0, w.getframerate())
        if suffix in (".pcm", ".raw"):
            samples = np.fromfile(path, dtype="<i2")
            return AudioClip(samples.astype(np.float64) / 32768.0, sample_rate)
        if suffix == ".f32":
            return AudioClip(np.fromfile(path, dtype="<f4").astype(np.float64), sample_rate)
    except (OSError, wave.Error) as e:
        raise DataError(f"cannot read audio file {path}: {e}") from e
    raise DataError(f"unsupported audio format: {path}")


def load_feature_source(path: Union[str, Path], mel: MelConfig = MelConfig()) -> FeatureSequence:
    """Load features from a feature file, or compute log-mel features from an audio file"""
    path = Path(path)
    if path.suffix.lower() in AUDIO_SUFFIXES:
        return log_mel(load_audio(path, mel.sample_rate), mel)
    return read_features(path, frame_rate=mel.frame_rate)
