# conftest.py
"""
TriggerTune - Shared Test Fixtures
Tiny configurations, synthetic stores and a written corpus for the test suite
"""
import numpy as np
import pytest
import torch

from models.config import ExperimentConfig, FeatureConfig, ModelConfig
from services.sampler_service import Utterance, UtteranceStore
from services.synth_service import SynthService
from utils.features import FeatureSequence


@pytest.fixture(autouse=True)
def float64_default():
    """Library code runs in double precision"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    """d = 8, heads = 2, N = 2, P = 1, M = 2"""
    return ModelConfig(
        enc_blocks=2, dec_blocks=1, d_model=8, heads=2, ffn_dim=16, query_count=2,
        phoneme_classes=3, speaker_classes=4, tap_layer=2, input_dim=12, speaker_dropout=0.6,
    )


def tiny_experiment(data_dir, runs_dir, **sections) -> ExperimentConfig:
    """Smallest configuration that runs every stage end to end"""
    base = {
        "paths": {"data_dir": str(data_dir), "runs_dir": str(runs_dir)},
        "synth": {
            "phoneme_count": 4, "keyword": (0, 1, 2), "feature_dim": 4,
            "train_speakers": 6, "utts_per_speaker": 8,
            "trigger_speakers": 6, "trigger_utts": 48,
            "eval_speakers": 3, "eval_utts_per_speaker": 8, "validation_speakers": 2,
            "negative_trials": 16, "negative_speakers": 4, "negative_duration_s": 5.0,
            "frames_per_phoneme": (3, 5), "command_length": (1, 2), "seed": 3,
        },
        "features": {"feature_dim": 4, "context_left": 1, "context_right": 1, "subsample_factor": 2},
        "model": {
            "enc_blocks": 2, "dec_blocks": 1, "d_model": 8, "heads": 2, "ffn_dim": 16, "query_count": 2,
            "phoneme_classes": 4, "speaker_classes": 6, "tap_layer": 2, "input_dim": 12,
        },
        "batch": {"batch_size": 12, "spkr_utts": 8, "speakers_per_batch": 2, "utts_per_speaker": 4},
        "training": {
            "baseline_epochs": 1, "finetune_epochs": 1, "baseline_batch_size": 8,
            "finetune_tap_layer": 1, "show_progress": False,
        },
        "protocol": {"enroll_per_speaker": 3, "runs": 2, "operating_fa_per_hr": 100.0},
        "inference": {"mu_values": (0.0, 0.5, 1.0)},
        "seeds": {"train": 1, "finetune": 1, "reproduce": (1,)},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny_cfg(tmp_path) -> ExperimentConfig:
    return tiny_experiment(tmp_path / "data", tmp_path / "runs")


@pytest.fixture
def tiny_corpus(tiny_cfg):
    """Synthetic corpus written to the configured data directory"""
    service = SynthService(tiny_cfg.synth)
    service.write_corpus(service.gen_corpus(), tiny_cfg.paths.data_dir)
    return tiny_cfg


def make_utterance(utt_id: str, frames: int = 12, dim: int = 4, speaker=None, label: int = 1,
                   phonemes=None, segment=None, hours=None, seed: int = 0) -> Utterance:
    rng = np.random.default_rng(seed)
    return Utterance(
        utt_id=utt_id,
        features=FeatureSequence(rng.standard_normal((frames, dim))),
        phrase_label=label,
        phoneme_labels=tuple(phonemes) if phonemes is not None else None,
        speaker_id=speaker,
        keyword_segment=segment,
        duration_hours=hours,
    )


@pytest.fixture
def speaker_store() -> UtteranceStore:
    """6 speakers x 5 keyword-first utterances with segment bounds"""
    utts = [
        make_utterance(f"s{s}_{u}", frames=10, speaker=f"spk{s}", segment=(0, 4), seed=10 * s + u)
        for s in range(6) for u in range(5)
    ]
    return UtteranceStore(utts, "speaker_id")


@pytest.fixture
def trigger_store() -> UtteranceStore:
    """20 phoneme-labelled utterances, alternating keyword / non-keyword"""
    utts = [
        make_utterance(f"vt{i}", frames=12, label=i % 2, phonemes=[0, 1, 2] if i % 2 else [2, 1], seed=100 + i)
        for i in range(20)
    ]
    return UtteranceStore(utts, "voice_trigger")
