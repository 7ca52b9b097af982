# models/config.py
"""
TriggerTune - Experiment Configuration Models
Pydantic models for every experiment section plus the INI loader
"""
import configparser
import hashlib
import json
from pathlib import Path
from typing import Annotated, Dict, Literal, Optional, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError


class FrozenModel(BaseModel):
    """Immutable, hashable base so configs can key cached factories"""
    model_config = ConfigDict(frozen=True, extra="forbid")


def _split_list(value):
    """Accept "0.4, 0.8" style INI values for list/tuple fields"""
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace(";", ",").split(",")]
        return [p for p in parts if p]
    return value


CsvFloats = Annotated[Tuple[float, ...], BeforeValidator(_split_list)]
CsvInts = Annotated[Tuple[int, ...], BeforeValidator(_split_list)]
IntRange = Annotated[Tuple[int, int], BeforeValidator(_split_list)]
FloatPair = Annotated[Tuple[float, float], BeforeValidator(_split_list)]


class MelConfig(FrozenModel):
    """Log-mel analysis parameters"""
    sample_rate: int = Field(16000, gt=0, description="Sample rate in Hz")
    window_ms: float = Field(25.0, gt=0, description="Analysis window length")
    hop_ms: float = Field(10.0, gt=0, description="Hop between windows")
    n_mels: int = Field(40, ge=1, description="Number of mel bins")
    f_min: float = Field(0.0, ge=0)
    f_max: Optional[float] = Field(None, gt=0)
    mel_floor: float = Field(1e-10, gt=0, description="Energy floor before log")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_samples


class FeatureConfig(FrozenModel):
    """Context stacking, subsampling and normalizer settings"""
    feature_dim: int = Field(40, ge=1)
    context_left: int = Field(3, ge=0)
    context_right: int = Field(3, ge=0)
    subsample_factor: int = Field(3, ge=1)
    std_floor: float = Field(1e-8, gt=0)

    @property
    def stacked_dim(self) -> int:
        return self.feature_dim * (self.context_left + 1 + self.context_right)


class ModelConfig(FrozenModel):
    """Encoder-decoder network dimensions"""
    enc_blocks: int = Field(6, ge=1, description="Encoder blocks N")
    dec_blocks: int = Field(1, ge=1, description="Decoder blocks P")
    d_model: int = Field(256, ge=1)
    heads: int = Field(4, ge=1)
    ffn_dim: int = Field(1024, ge=1)
    query_count: int = Field(4, ge=1, description="Trainable queries M")
    phoneme_classes: int = Field(54, ge=1, description="Phonemes V (blank excluded)")
    speaker_classes: int = Field(1, ge=1, description="Speaker-ID classes K")
    tap_layer: int = Field(5, ge=1, description="Encoder block feeding the decoder")
    input_dim: int = Field(280, ge=1)
    speaker_dropout: float = Field(0.6, ge=0.0, lt=1.0)
    block_dropout: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_dims(self):
        if self.tap_layer > self.enc_blocks:
            raise ValueError(f"tap_layer {self.tap_layer} exceeds enc_blocks {self.enc_blocks}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        return self

    @property
    def embedding_dim(self) -> int:
        return self.d_model * self.query_count

    @property
    def output_classes(self) -> int:
        return self.phoneme_classes + 1

    @property
    def blank_index(self) -> int:
        return self.phoneme_classes


class LossWeights(FrozenModel):
    """Scaling factors of the multi-task objective"""
    alpha: float = Field(1.0, ge=0.0, description="Phrase loss weight")
    beta: float = Field(1.0, ge=0.0, description="Speaker loss weight")
    gamma: float = Field(0.1, ge=0.0, description="Metric loss weight")
    strict_pairs: bool = Field(False, description="Drop different-speaker non-keyword negatives")


class BatchSpec(FrozenModel):
    """Mini-batch composition across the two training sources"""
    batch_size: int = Field(128, ge=1)
    spkr_utts: int = Field(112, ge=0)
    speakers_per_batch: int = Field(28, ge=0)
    utts_per_speaker: int = Field(4, ge=1)
    drop_prob: float = Field(0.5, ge=0.0, le=1.0)
    drop_mode: Literal["remove", "silence"] = "remove"

    @model_validator(mode="after")
    def check_counts(self):
        if self.spkr_utts != self.speakers_per_batch * self.utts_per_speaker:
            raise ValueError("spkr_utts must equal speakers_per_batch * utts_per_speaker")
        if self.spkr_utts > self.batch_size:
            raise ValueError("spkr_utts cannot exceed batch_size")
        return self

    @property
    def trigger_utts(self) -> int:
        return self.batch_size - self.spkr_utts


class LrSchedule(FrozenModel):
    """Warmup, linear decay, then exponential decay with a floor"""
    peak: float = Field(1e-3, gt=0)
    warmup_end_epoch: float = Field(2.0, gt=0)
    linear_end_epoch: float = Field(27.0, gt=0)
    linear_end_value: float = Field(7e-4, gt=0)
    exp_factor: float = Field(0.7, gt=0, le=1.0, description="Per-epoch multiplier after the linear phase")
    min_lr: float = Field(1e-7, gt=0)
    last_epoch: float = Field(40.0, gt=0)

    @model_validator(mode="after")
    def check_knots(self):
        if not self.warmup_end_epoch < self.linear_end_epoch <= self.last_epoch:
            raise ValueError("schedule knots must satisfy warmup_end < linear_end <= last_epoch")
        return self

    def compressed(self, epochs: float) -> "LrSchedule":
        """Scale every knot so the whole schedule spans `epochs` epochs"""
        scale = epochs / self.last_epoch
        return self.model_copy(update={
            "warmup_end_epoch": self.warmup_end_epoch * scale,
            "linear_end_epoch": self.linear_end_epoch * scale,
            "last_epoch": float(epochs),
            "exp_factor": self.exp_factor ** (1.0 / scale),
        })


class TrainingConfig(FrozenModel):
    """Two-stage training settings"""
    baseline_epochs: int = Field(5, ge=1)
    finetune_epochs: int = Field(10, ge=1)
    baseline_batch_size: int = Field(32, ge=1)
    finetune_tap_layer: int = Field(5, ge=1, description="Tap layer used after fine-tuning starts")
    grad_clip_norm: Optional[float] = Field(None, gt=0, description="Global norm clip; 5.0 enables the guard")
    adam_betas: FloatPair = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    show_progress: bool = True


class ProtocolConfig(FrozenModel):
    """Repeated-enrollment evaluation protocol"""
    enroll_per_speaker: int = Field(5, ge=1)
    runs: int = Field(5, ge=1)
    operating_fa_per_hr: float = Field(0.01, ge=0.0)
    seed: int = 0


class InferenceConfig(FrozenModel):
    """Scoring, calibration and fusion settings"""
    mu_values: CsvFloats = (0.4, 0.8, 0.95, 0.99)
    standardize_ctc: bool = False
    calibration_seed: int = 0

    @field_validator("mu_values")
    @classmethod
    def check_mu(cls, v):
        for mu in v:
            if not 0.0 <= mu <= 1.0:
                raise ValueError(f"fusion weight {mu} outside [0, 1]")
        return v


class SynthSpec(FrozenModel):
    """Synthetic corpus generator specification"""
    phoneme_count: int = Field(12, ge=2)
    keyword: CsvInts = (0, 1, 2, 3)
    feature_dim: int = Field(40, ge=1)
    train_speakers: int = Field(30, ge=1)
    utts_per_speaker: int = Field(40, ge=1)
    trigger_speakers: int = Field(60, ge=1)
    trigger_utts: int = Field(1200, ge=1)
    trigger_positive_fraction: float = Field(0.5, ge=0.0, le=1.0)
    near_miss_fraction: float = Field(0.35, ge=0.0, le=1.0)
    eval_speakers: int = Field(8, ge=1)
    eval_utts_per_speaker: int = Field(30, ge=2)
    validation_speakers: int = Field(4, ge=1)
    negative_trials: int = Field(200, ge=1)
    negative_speakers: int = Field(20, ge=1)
    negative_duration_s: float = Field(10.0, gt=0)
    frames_per_phoneme: IntRange = (6, 10)
    command_length: IntRange = (3, 6)
    prototype_spread: float = Field(0.3, ge=0.0, description="Within-phoneme trajectory deviation")
    speaker_offset_scale: float = Field(1.0, ge=0.0)
    tilt_scale: float = Field(0.3, ge=0.0, description="Spectral tilt relative to the offset scale")
    noise_scale: float = Field(0.3, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def check_spec(self):
        if not self.keyword:
            raise ValueError("keyword must contain at least one phoneme")
        if any(p < 0 or p >= self.phoneme_count for p in self.keyword):
            raise ValueError("keyword phonemes must be < phoneme_count")
        lo, hi = self.frames_per_phoneme
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_phoneme must be a range 1 <= lo <= hi")
        lo, hi = self.command_length
        if lo < 1 or hi < lo:
            raise ValueError("command_length must be a range 1 <= lo <= hi")
        return self


class PathsConfig(FrozenModel):
    """Data and output locations"""
    data_dir: str = "data/synth"
    runs_dir: str = "runs"
    baseline_checkpoint: Optional[str] = None


class SeedsConfig(FrozenModel):
    """Named seeds; every random stream derives from one of these"""
    train: int = 1
    finetune: int = 1
    reproduce: CsvInts = (1, 2, 3)


class ExperimentConfig(FrozenModel):
    """Complete experiment configuration echoed into every output"""
    paths: PathsConfig = PathsConfig()
    synth: SynthSpec = SynthSpec()
    mel: MelConfig = MelConfig()
    features: FeatureConfig = FeatureConfig()
    model: ModelConfig = ModelConfig()
    losses: LossWeights = LossWeights()
    batch: BatchSpec = BatchSpec()
    schedule: LrSchedule = LrSchedule()
    training: TrainingConfig = TrainingConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    inference: InferenceConfig = InferenceConfig()
    seeds: SeedsConfig = SeedsConfig()

    @model_validator(mode="after")
    def check_consistency(self):
        if self.model.input_dim != self.features.stacked_dim:
            raise ValueError(
                f"model.input_dim {self.model.input_dim} != stacked feature dim {self.features.stacked_dim}"
            )
        if self.training.finetune_tap_layer > self.model.enc_blocks:
            raise ValueError("training.finetune_tap_layer exceeds model.enc_blocks")
        if self.synth.feature_dim != self.features.feature_dim:
            raise ValueError("synth.feature_dim must match features.feature_dim")
        return self

    def echo(self) -> Dict:
        """JSON-ready copy used for provenance"""
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON echo"""
        canonical = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_experiment_config(path: Optional[str] = None, overrides: Optional[Dict[str, Dict]] = None) -> ExperimentConfig:
    """
    Load an INI experiment file into a validated ExperimentConfig

    Args:
        path (str, optional): INI file with sections named like ExperimentConfig fields
        overrides (Dict[str, Dict], optional): Section -> key -> value overrides

    Returns:
        ExperimentConfig: Validated configuration

    Example:
        cfg = load_experiment_config("configs/desk.ini", {"seeds": {"train": 2}})
    """
    sections: Dict[str, Dict] = {}
    if path is not None:
        ini_path = Path(path)
        if not ini_path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read(ini_path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        known = set(ExperimentConfig.model_fields)
        for name in parser.sections():
            if name not in known:
                raise ConfigError(f"unknown config section [{name}] in {path}")
            sections[name] = dict(parser.items(name))
    for name, values in (overrides or {}).items():
        sections.setdefault(name, {}).update(values)
    try:
        return ExperimentConfig(**sections)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e
