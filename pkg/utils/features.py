# utils/features.py
"""
TriggerTune - Acoustic Feature Utilities
Log-mel analysis, context stacking, subsampling and global normalization
"""
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch
import torchaudio

from models.config import FeatureConfig, MelConfig
from utils.errors import DataError


@dataclass(frozen=True)
class AudioClip:
    """Single-channel audio"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"audio must be mono, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class FeatureSequence:
    """Time-major feature matrix (T x F) with its frame rate"""
    frames: np.ndarray
    frame_rate: float = 100.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DataError(f"feature sequence needs shape (T>=1, F), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError("feature sequence contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class NormalizerStats:
    """Per-dimension global mean and (floored) population std"""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError(f"normalizer shapes differ: mean {mean.shape}, std {std.shape}")
        if np.any(std <= 0):
            raise DataError("normalizer std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of every triangular mel filter, HTK mel scale"""
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2.0
    m_min = 2595.0 * math.log10(1.0 + cfg.f_min / 700.0)
    m_max = 2595.0 * math.log10(1.0 + f_max / 700.0)
    m_pts = np.linspace(m_min, m_max, cfg.n_mels + 2)
    return (700.0 * (10.0 ** (m_pts / 2595.0) - 1.0))[1:-1]


def log_mel(clip: AudioClip, cfg: MelConfig = MelConfig()) -> FeatureSequence:
    """
    Compute log mel-filterbank features without centre padding

    Args:
        clip (AudioClip): Mono audio
        cfg (MelConfig): Window, hop, bins and energy floor

    Returns:
        FeatureSequence: T x n_mels with T = 1 + floor((len - window) / hop)

    Example:
        fs = log_mel(AudioClip(np.zeros(16000), 16000))
        # fs.frames.shape == (98, 40)
    """
    if clip.sample_rate != cfg.sample_rate:
        raise DataError(f"clip sample rate {clip.sample_rate} != configured {cfg.sample_rate}")
    window = cfg.window_samples
    if clip.samples.shape[0] < window:
        raise DataError(f"clip of {clip.samples.shape[0]} samples is shorter than one {window}-sample window")

    transform = torchaudio.transforms.MelSpectrogram(
        sample_rate=cfg.sample_rate,
        n_fft=window,
        win_length=window,
        hop_length=cfg.hop_samples,
        f_min=cfg.f_min,
        f_max=cfg.f_max,
        n_mels=cfg.n_mels,
        power=2.0,
        center=False,
        mel_scale="htk",
    ).to(torch.float64)
    with torch.no_grad():
        energies = transform(torch.as_tensor(clip.samples, dtype=torch.float64))
    frames = torch.log(energies + cfg.mel_floor).T.contiguous().numpy()
    return FeatureSequence(frames=frames, frame_rate=cfg.frame_rate)


def stack_context(fs: FeatureSequence, left: int = 3, right: int = 3) -> FeatureSequence:
    """
    Concatenate each frame with its neighbours, replicating edge frames

    Args:
        fs (FeatureSequence): T x F input
        left (int): Frames of left context
        right (int): Frames of right context

    Returns:
        FeatureSequence: T x (left + 1 + right) * F

    Example:
        stacked = stack_context(fs40)  # 40 -> 280 columns
    """
    if left < 0 or right < 0:
        raise DataError("context widths must be non-negative")
    T = fs.num_frames
    offsets = np.arange(-left, right + 1)
    index = np.clip(np.arange(T)[:, None] + offsets[None, :], 0, T - 1)
    stacked = fs.frames[index].reshape(T, -1)
    return FeatureSequence(frames=stacked, frame_rate=fs.frame_rate)


def subsample(fs: FeatureSequence, factor: int = 3) -> FeatureSequence:
    """Keep frames 0, factor, 2*factor, ... (ceil(T / factor) rows)"""
    if factor < 1:
        raise DataError(f"subsample factor must be >= 1, got {factor}")
    return FeatureSequence(frames=fs.frames[::factor], frame_rate=fs.frame_rate / factor)


@dataclass
class RunningMoments:
    """Mergeable count / mean / sum-of-squared-deviations accumulator"""
    dim: int
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, frames: np.ndarray) -> "RunningMoments":
        if frames.shape[1] != self.dim:
            raise DataError(f"frame dim {frames.shape[1]} != accumulator dim {self.dim}")
        n = frames.shape[0]
        batch_mean = frames.mean(axis=0)
        batch_m2 = ((frames - batch_mean) ** 2).sum(axis=0)
        return self.merge(RunningMoments(self.dim, n, batch_mean, batch_m2))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / total)
        self.count = total
        return self


def fit_normalizer(corpus: Iterable[FeatureSequence], std_floor: float = 1e-8) -> NormalizerStats:
    """
    Fit the global per-dimension mean and population std over every frame

    Args:
        corpus (Iterable[FeatureSequence]): Sequences sharing one feature dim
        std_floor (float): Lower bound on the std

    Returns:
        NormalizerStats: Global statistics

    Example:
        stats = fit_normalizer(utt.features for utt in store)
    """
    moments: Optional[RunningMoments] = None
    for fs in corpus:
        if moments is None:
            moments = RunningMoments(fs.dim)
        moments.update(fs.frames)
    if moments is None:
        raise DataError("cannot fit a normalizer on an empty corpus")
    if moments.count < 2:
        raise DataError(f"normalizer needs at least 2 frames, got {moments.count}")
    std = np.maximum(np.sqrt(moments.m2 / moments.count), std_floor)
    return NormalizerStats(mean=moments.mean, std=std)


def normalize(fs: FeatureSequence, stats: NormalizerStats) -> FeatureSequence:
    """Standardize each dimension with the global statistics"""
    if fs.dim != stats.dim:
        raise DataError(f"feature dim {fs.dim} != normalizer dim {stats.dim}")
    return FeatureSequence(frames=(fs.frames - stats.mean) / stats.std, frame_rate=fs.frame_rate)


def denormalize(fs: FeatureSequence, stats: NormalizerStats) -> FeatureSequence:
    """Inverse of normalize"""
    if fs.dim != stats.dim:
        raise DataError(f"feature dim {fs.dim} != normalizer dim {stats.dim}")
    return FeatureSequence(frames=fs.frames * stats.std + stats.mean, frame_rate=fs.frame_rate)


class FeaturePipeline:
    """Normalize 40-dim features, then stack context, then subsample"""

    def __init__(self, stats: NormalizerStats, cfg: FeatureConfig = FeatureConfig()):
        if stats.dim != cfg.feature_dim:
            raise DataError(f"normalizer dim {stats.dim} != feature_dim {cfg.feature_dim}")
        self.stats = stats
        self.cfg = cfg

    def __call__(self, fs: FeatureSequence) -> FeatureSequence:
        out = normalize(fs, self.stats)
        out = stack_context(out, self.cfg.context_left, self.cfg.context_right)
        return subsample(out, self.cfg.subsample_factor)

    def output_frames(self, num_frames: int) -> int:
        return -(-num_frames // self.cfg.subsample_factor)


def collate(sequences: List[FeatureSequence], dtype: torch.dtype = torch.float64) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Zero-pad sequences into one batch tensor

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: (B x T_max x F) features and (B,) lengths
    """
    if not sequences:
        raise DataError("cannot collate an empty batch")
    lengths = torch.tensor([fs.num_frames for fs in sequences], dtype=torch.long)
    dim = sequences[0].dim
    batch = torch.zeros(len(sequences), int(lengths.max()), dim, dtype=dtype)
    for i, fs in enumerate(sequences):
        if fs.dim != dim:
            raise DataError(f"sequence {i} has dim {fs.dim}, expected {dim}")
        batch[i, : fs.num_frames] = torch.as_tensor(fs.frames, dtype=dtype)
    return batch, lengths
