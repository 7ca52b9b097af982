# services/synth_service.py
"""
TriggerTune - Synthetic Corpus Service
Deterministic voice-trigger, speaker-ID, evaluation and negative data in feature space
"""
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.config import SynthSpec
from models.manifest import ManifestRecord, Split, write_manifest
from utils.errors import DataError
from utils.feature_io import write_features

logger = logging.getLogger(__name__)

# Random stream ids; every draw comes from default_rng([seed, stream, index])
PROTOTYPE_STREAM = 0
TRAIN_SPEAKER_STREAM = 1
TRIGGER_SPEAKER_STREAM = 2
EVAL_SPEAKER_STREAM = 3
VALIDATION_SPEAKER_STREAM = 4
POOL_SPEAKER_STREAM = 5
TRIGGER_UTT_STREAM = 11
SPKR_UTT_STREAM = 12
EVAL_UTT_STREAM = 13
VALIDATION_UTT_STREAM = 14
NEGATIVE_UTT_STREAM = 15

CONTROL_POINTS = 4
NOMINAL_FRAME_RATE = 100.0

MANIFEST_FILES = {
    "voice_trigger": "voice_trigger.tsv",
    "speaker_id": "speaker_id.tsv",
    "eval": "eval.tsv",
    "negatives": "negatives.tsv",
}


@dataclass(frozen=True)
class SpeakerProfile:
    """Persistent additive offset and multiplicative spectral tilt of one speaker"""
    offset: np.ndarray
    tilt: np.ndarray


@dataclass
class SynthUtterance:
    utt_id: str
    frames: np.ndarray
    phonemes: List[int]
    durations: List[int]
    phrase_label: int
    speaker_id: Optional[str] = None
    keyword_segment: Optional[Tuple[int, int]] = None
    split: Split = Split.TRAIN
    duration_hours: Optional[float] = None
    keep_phonemes: bool = True

    def record(self, feature_path: str) -> ManifestRecord:
        return ManifestRecord(
            utt_id=self.utt_id,
            feature_path=feature_path,
            speaker_id=self.speaker_id,
            phrase_label=self.phrase_label,
            keyword_segment=self.keyword_segment,
            phonemes=tuple(self.phonemes) if self.keep_phonemes else None,
            duration_hours=self.duration_hours,
            split=self.split,
        )


@dataclass
class GeneratedCorpus:
    """The four data sources of an experiment"""
    voice_trigger: List[SynthUtterance] = field(default_factory=list)
    speaker_id: List[SynthUtterance] = field(default_factory=list)
    eval: List[SynthUtterance] = field(default_factory=list)
    negatives: List[SynthUtterance] = field(default_factory=list)

    def sources(self) -> Dict[str, List[SynthUtterance]]:
        return {
            "voice_trigger": self.voice_trigger,
            "speaker_id": self.speaker_id,
            "eval": self.eval,
            "negatives": self.negatives,
        }


class SynthService:
    """
    Generator of a phonetically structured feature-space corpus

    Each phoneme owns a centre vector and a smooth trajectory through a few
    random control points. A speaker scales the trajectory by a spectral tilt
    and adds a persistent offset; frames then receive white noise.

    Example:
        service = SynthService(SynthSpec(seed=7))
        corpus = service.gen_corpus()
        service.write_corpus(corpus, "data/synth")
    """

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = self._rng(PROTOTYPE_STREAM, 0)
        F = spec.feature_dim
        self._centers = rng.standard_normal((spec.phoneme_count, F))
        self._controls = rng.standard_normal((spec.phoneme_count, CONTROL_POINTS, F))
        self._ramp = np.linspace(-1.0, 1.0, F)

    def _rng(self, stream: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.seed, stream, index])

    @property
    def keyword(self) -> List[int]:
        return list(self.spec.keyword)

    def speaker_profile(self, stream: int, index: int) -> SpeakerProfile:
        """Profile of speaker `index` in a speaker stream; independent of the scale settings' draws"""
        rng = self._rng(stream, index)
        z = rng.standard_normal(self.spec.feature_dim)
        t = rng.standard_normal()
        scale = self.spec.speaker_offset_scale
        return SpeakerProfile(
            offset=scale * z,
            tilt=1.0 + scale * self.spec.tilt_scale * t * self._ramp,
        )

    def phoneme_trajectory(self, phoneme: int, length: int) -> np.ndarray:
        """Clean L x F trajectory of one phoneme"""
        u = np.linspace(0.0, 1.0, length) * (CONTROL_POINTS - 1)
        lo = np.floor(u).astype(int)
        hi = np.minimum(lo + 1, CONTROL_POINTS - 1)
        frac = (u - lo)[:, None]
        ctrl = self._controls[phoneme]
        deviation = ctrl[lo] * (1.0 - frac) + ctrl[hi] * frac
        return self._centers[phoneme] + self.spec.prototype_spread * deviation

    def render(self, phonemes: Sequence[int], durations: Sequence[int],
               speaker: Optional[SpeakerProfile], rng: Optional[np.random.Generator]) -> np.ndarray:
        """
        Render a phoneme string with explicit durations

        Args:
            phonemes (Sequence[int]): Phoneme ids
            durations (Sequence[int]): Frames per phoneme
            speaker (SpeakerProfile, optional): Speaker factor; None leaves the content clean
            rng (np.random.Generator, optional): Noise source; None renders without noise

        Returns:
            np.ndarray: T x F frames with T = sum(durations)
        """
        if len(phonemes) != len(durations) or not phonemes:
            raise DataError("phonemes and durations must be non-empty and of equal length")
        if any(p < 0 or p >= self.spec.phoneme_count for p in phonemes):
            raise DataError(f"phoneme ids must be below {self.spec.phoneme_count}")
        frames = np.concatenate([self.phoneme_trajectory(p, d) for p, d in zip(phonemes, durations)])
        if speaker is not None:
            frames = frames * speaker.tilt + speaker.offset
        if rng is not None and self.spec.noise_scale > 0:
            frames = frames + self.spec.noise_scale * rng.standard_normal(frames.shape)
        return frames

    # Content sampling

    def _durations(self, rng: np.random.Generator, count: int) -> List[int]:
        lo, hi = self.spec.frames_per_phoneme
        return rng.integers(lo, hi + 1, size=count).tolist()

    def _near_miss(self, rng: np.random.Generator) -> List[int]:
        """Keyword with one phoneme substituted"""
        phonemes = self.keyword
        k = int(rng.integers(len(phonemes)))
        choices = [p for p in range(self.spec.phoneme_count) if p != phonemes[k]]
        phonemes[k] = int(rng.choice(choices))
        return phonemes

    def _random_string(self, rng: np.random.Generator) -> List[int]:
        """Random phoneme string of keyword-like length that is not the keyword"""
        length = len(self.spec.keyword) + int(rng.integers(0, 2))
        while True:
            phonemes = rng.integers(0, self.spec.phoneme_count, size=length).tolist()
            if phonemes != self.keyword:
                return phonemes

    def _non_keyword(self, rng: np.random.Generator) -> List[int]:
        if rng.random() < self.spec.near_miss_fraction:
            return self._near_miss(rng)
        return self._random_string(rng)

    def _keyword_utterance(self, utt_id: str, speaker: SpeakerProfile, rng: np.random.Generator,
                           **fields) -> SynthUtterance:
        phonemes = self.keyword
        durations = self._durations(rng, len(phonemes))
        return SynthUtterance(
            utt_id=utt_id,
            frames=self.render(phonemes, durations, speaker, rng),
            phonemes=phonemes,
            durations=durations,
            phrase_label=1,
            keyword_segment=(0, sum(durations)),
            **fields,
        )

    # Sources

    def gen_voice_trigger(self) -> List[SynthUtterance]:
        """Phoneme- and phrase-labelled utterances from anonymous speakers"""
        spec = self.spec
        speakers = [self.speaker_profile(TRIGGER_SPEAKER_STREAM, i) for i in range(spec.trigger_speakers)]
        out = []
        for i in range(spec.trigger_utts):
            rng = self._rng(TRIGGER_UTT_STREAM, i)
            speaker = speakers[int(rng.integers(spec.trigger_speakers))]
            utt_id = f"vt{i:06d}"
            if rng.random() < spec.trigger_positive_fraction:
                out.append(self._keyword_utterance(utt_id, speaker, rng))
                continue
            phonemes = self._non_keyword(rng)
            durations = self._durations(rng, len(phonemes))
            out.append(SynthUtterance(
                utt_id=utt_id,
                frames=self.render(phonemes, durations, speaker, rng),
                phonemes=phonemes,
                durations=durations,
                phrase_label=0,
            ))
        return out

    def gen_speaker_id(self) -> List[SynthUtterance]:
        """Keyword followed by a command, with speaker labels and keyword bounds but no phonemes"""
        spec = self.spec
        out = []
        for s in range(spec.train_speakers):
            speaker = self.speaker_profile(TRAIN_SPEAKER_STREAM, s)
            for u in range(spec.utts_per_speaker):
                rng = self._rng(SPKR_UTT_STREAM, s * spec.utts_per_speaker + u)
                lo, hi = spec.command_length
                command = rng.integers(0, spec.phoneme_count, size=int(rng.integers(lo, hi + 1))).tolist()
                phonemes = self.keyword + command
                durations = self._durations(rng, len(phonemes))
                keyword_frames = sum(durations[: len(spec.keyword)])
                out.append(SynthUtterance(
                    utt_id=f"sp{s:04d}_{u:04d}",
                    frames=self.render(phonemes, durations, speaker, rng),
                    phonemes=phonemes,
                    durations=durations,
                    phrase_label=1,
                    speaker_id=f"s{s:04d}",
                    keyword_segment=(0, keyword_frames),
                    keep_phonemes=False,
                ))
        return out

    def _enrolled_speakers(self, split: Split) -> Tuple[int, int, int, str]:
        if split == Split.EVAL:
            return self.spec.eval_speakers, EVAL_SPEAKER_STREAM, EVAL_UTT_STREAM, "e"
        return self.spec.validation_speakers, VALIDATION_SPEAKER_STREAM, VALIDATION_UTT_STREAM, "v"

    def gen_enrolled(self, split: Split) -> List[SynthUtterance]:
        """Keyword segments of held-out speakers (evaluation or calibration)"""
        count, speaker_stream, utt_stream, prefix = self._enrolled_speakers(split)
        per = self.spec.eval_utts_per_speaker
        out = []
        for s in range(count):
            speaker = self.speaker_profile(speaker_stream, s)
            for u in range(per):
                rng = self._rng(utt_stream, s * per + u)
                out.append(self._keyword_utterance(
                    f"{prefix}{s:04d}_{u:04d}", speaker, rng, speaker_id=f"{prefix}{s:04d}", split=split,
                ))
        return out

    def gen_negatives(self) -> List[SynthUtterance]:
        """
        Non-keyword candidate segments with nominal durations

        Half of the negatives come from the held-out speakers themselves, the rest
        from a separate pool; a quarter as many validation negatives follow the
        evaluation ones.
        """
        spec = self.spec
        hours = spec.negative_duration_s / 3600.0
        pool = [self.speaker_profile(POOL_SPEAKER_STREAM, i) for i in range(spec.negative_speakers)]
        plan = [(Split.EVAL, spec.negative_trials), (Split.VALIDATION, max(1, spec.negative_trials // 4))]
        out, index = [], 0
        for split, count in plan:
            enrolled, speaker_stream, _, prefix = self._enrolled_speakers(split)
            for _ in range(count):
                rng = self._rng(NEGATIVE_UTT_STREAM, index)
                if rng.random() < 0.5:
                    s = int(rng.integers(enrolled))
                    speaker, speaker_id = self.speaker_profile(speaker_stream, s), f"{prefix}{s:04d}"
                else:
                    s = int(rng.integers(spec.negative_speakers))
                    speaker, speaker_id = pool[s], f"n{s:04d}"
                phonemes = self._non_keyword(rng)
                durations = self._durations(rng, len(phonemes))
                out.append(SynthUtterance(
                    utt_id=f"neg{index:06d}",
                    frames=self.render(phonemes, durations, speaker, rng),
                    phonemes=phonemes,
                    durations=durations,
                    phrase_label=0,
                    speaker_id=speaker_id,
                    split=split,
                    duration_hours=hours,
                ))
                index += 1
        return out

    def gen_corpus(self) -> GeneratedCorpus:
        """Generate all four sources"""
        corpus = GeneratedCorpus(
            voice_trigger=self.gen_voice_trigger(),
            speaker_id=self.gen_speaker_id(),
            eval=self.gen_enrolled(Split.EVAL) + self.gen_enrolled(Split.VALIDATION),
            negatives=self.gen_negatives(),
        )
        logger.info(
            "generated corpus: %d voice-trigger, %d speaker-ID, %d eval/validation, %d negatives",
            len(corpus.voice_trigger), len(corpus.speaker_id), len(corpus.eval), len(corpus.negatives),
        )
        return corpus

    def write_corpus(self, corpus: GeneratedCorpus, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """
        Write features and the four manifests; the directory appears only when complete

        Args:
            corpus (GeneratedCorpus): Generated data
            out_dir (Union[str, Path]): Destination, which must not exist yet (or be empty)

        Returns:
            Dict[str, Path]: Manifest path per source
        """
        out_dir = Path(out_dir)
        if out_dir.exists() and any(out_dir.iterdir()):
            raise DataError(f"output directory {out_dir} already exists and is not empty")
        tmp = out_dir.parent / f".{out_dir.name}.tmp-{os.getpid()}"
        try:
            if tmp.exists():
                shutil.rmtree(tmp)
            (tmp / "features").mkdir(parents=True)
            for source, utterances in corpus.sources().items():
                records = []
                for utt in utterances:
                    rel = f"features/{utt.utt_id}.feat"
                    write_features(tmp / rel, utt.frames)
                    records.append(utt.record(rel))
                write_manifest(tmp / MANIFEST_FILES[source], records)
            (tmp / "synth_spec.json").write_text(
                json.dumps(json.loads(self.spec.model_dump_json()), indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            if out_dir.exists():
                out_dir.rmdir()
            os.replace(tmp, out_dir)
        except OSError as e:
            shutil.rmtree(tmp, ignore_errors=True)
            raise DataError(f"cannot write corpus to {out_dir}: {e}") from e
        logger.info("wrote corpus to %s", out_dir)
        return {source: out_dir / name for source, name in MANIFEST_FILES.items()}
