# services/sampler_service.py
"""
TriggerTune - Sampler Service
Utterance stores, mixed-source mini-batches and keyword-segment dropping
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.config import BatchSpec, MelConfig
from models.manifest import ManifestRecord, Split, read_manifest
from utils.errors import DataError
from utils.feature_io import load_feature_source
from utils.features import FeatureSequence

logger = logging.getLogger(__name__)


class Source(str, Enum):
    SPEAKER_ID = "speaker_id"
    VOICE_TRIGGER = "voice_trigger"


@dataclass(frozen=True)
class Utterance:
    """Features plus whatever labels the source provides"""
    utt_id: str
    features: FeatureSequence
    phrase_label: int
    phoneme_labels: Optional[Tuple[int, ...]] = None
    speaker_id: Optional[str] = None
    keyword_segment: Optional[Tuple[int, int]] = None
    duration_hours: Optional[float] = None
    split: Split = Split.TRAIN
    dropped: bool = False

    def __post_init__(self):
        if self.phrase_label not in (0, 1):
            raise DataError(f"{self.utt_id}: phrase label must be 0 or 1")
        if self.keyword_segment is not None:
            start, end = self.keyword_segment
            if not 0 <= start < end <= self.features.num_frames:
                raise DataError(
                    f"{self.utt_id}: keyword segment {self.keyword_segment} outside [0, {self.features.num_frames})"
                )

    @property
    def num_frames(self) -> int:
        return self.features.num_frames

    @classmethod
    def from_record(cls, record: ManifestRecord, features: FeatureSequence) -> "Utterance":
        return cls(
            utt_id=record.utt_id,
            features=features,
            phrase_label=record.phrase_label,
            phoneme_labels=record.phonemes,
            speaker_id=record.speaker_id,
            keyword_segment=record.keyword_segment,
            duration_hours=record.duration_hours,
            split=record.split,
        )


class UtteranceStore:
    """Read-only collection of utterances indexed by speaker"""

    def __init__(self, utterances: Sequence[Utterance], name: str = "store"):
        self.name = name
        self.utterances: List[Utterance] = list(utterances)
        self.by_speaker: Dict[str, List[int]] = {}
        for i, utt in enumerate(self.utterances):
            if utt.speaker_id is not None:
                self.by_speaker.setdefault(utt.speaker_id, []).append(i)
        self.speakers: List[str] = sorted(self.by_speaker)
        self.speaker_index: Dict[str, int] = {s: k for k, s in enumerate(self.speakers)}

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def subset(self, predicate, name: Optional[str] = None) -> "UtteranceStore":
        return UtteranceStore([u for u in self.utterances if predicate(u)], name or self.name)

    def split(self, count: int, rng: np.random.Generator) -> Tuple["UtteranceStore", "UtteranceStore"]:
        """
        Draw `count` utterances out of the store

        Returns:
            Tuple[UtteranceStore, UtteranceStore]: (kept, drawn), both in store order
        """
        if not 0 < count < len(self.utterances):
            raise DataError(f"{self.name}: cannot draw {count} of {len(self.utterances)} utterances")
        drawn = set(rng.permutation(len(self.utterances))[:count].tolist())
        kept = [u for i, u in enumerate(self.utterances) if i not in drawn]
        taken = [u for i, u in enumerate(self.utterances) if i in drawn]
        return UtteranceStore(kept, self.name), UtteranceStore(taken, f"{self.name}_heldout")

    @classmethod
    def from_manifest(cls, path: Union[str, Path], mel: MelConfig = MelConfig(),
                      name: Optional[str] = None) -> "UtteranceStore":
        """
        Load every utterance of a manifest

        Example:
            store = UtteranceStore.from_manifest("data/synth/speaker_id.tsv")
        """
        path = Path(path)
        records = read_manifest(path)
        utterances = [
            Utterance.from_record(r, load_feature_source(path.parent / r.feature_path, mel)) for r in records
        ]
        logger.info("loaded %d utterances from %s", len(utterances), path)
        return cls(utterances, name or path.stem)


@dataclass
class Batch:
    """Utterances of one mini-batch with their source tags"""
    utterances: List[Utterance] = field(default_factory=list)
    sources: List[Source] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def count(self, source: Source) -> int:
        return sum(1 for s in self.sources if s == source)


def drop_keyword_segment(u: Utterance, drop: bool, mode: str = "remove") -> Utterance:
    """
    Remove (or silence) the keyword segment and relabel the utterance as non-keyword

    Args:
        u (Utterance): Utterance with keyword bounds
        drop (bool): Decision drawn by the caller
        mode (str): "remove" cuts the frames out; "silence" overwrites them with the
            per-dimension minimum of the utterance

    Returns:
        Utterance: Unchanged when drop is False

    Example:
        shorter = drop_keyword_segment(utt, drop=True)  # T - (end - start) frames
    """
    if not drop:
        return u
    if u.keyword_segment is None:
        raise DataError(f"{u.utt_id}: cannot drop a keyword segment without segment bounds")
    start, end = u.keyword_segment
    frames = u.features.frames
    if mode == "remove":
        kept = np.concatenate([frames[:start], frames[end:]])
        if kept.shape[0] == 0:
            raise DataError(f"{u.utt_id}: dropping the keyword leaves no frames")
    elif mode == "silence":
        kept = frames.copy()
        kept[start:end] = frames.min(axis=0)
    else:
        raise ValueError(f"unknown drop mode: {mode}")
    return dataclasses.replace(
        u,
        features=FeatureSequence(frames=kept, frame_rate=u.features.frame_rate),
        phrase_label=0,
        keyword_segment=None,
        phoneme_labels=None,
        dropped=True,
    )


def compose_batch(spkr_store: UtteranceStore, trigger_store: UtteranceStore, spec: BatchSpec,
                  rng: np.random.Generator, trigger_indices: Optional[Sequence[int]] = None) -> Batch:
    """
    Draw one mixed mini-batch

    Speaker-ID utterances come in groups of `utts_per_speaker` from
    `speakers_per_batch` distinct speakers; the rest of the batch comes from the
    voice-trigger store. Each speaker-ID utterance loses its keyword segment with
    probability `drop_prob`.

    Args:
        spkr_store (UtteranceStore): Speaker-labelled utterances with keyword bounds
        trigger_store (UtteranceStore): Phoneme/phrase-labelled utterances
        spec (BatchSpec): Batch composition
        rng (np.random.Generator): Sole source of randomness
        trigger_indices (Sequence[int], optional): Voice-trigger rows to use instead of a random draw

    Returns:
        Batch: Speaker-ID utterances first, then voice-trigger utterances

    Raises:
        DataError: if either store cannot supply the requested counts
    """
    eligible = [s for s in spkr_store.speakers if len(spkr_store.by_speaker[s]) >= spec.utts_per_speaker]
    if spec.speakers_per_batch and len(eligible) < spec.speakers_per_batch:
        raise DataError(
            f"{spkr_store.name}: {len(eligible)} speakers have >= {spec.utts_per_speaker} utterances, "
            f"{spec.speakers_per_batch} needed"
        )
    n_trigger = spec.trigger_utts
    if trigger_indices is None:
        if len(trigger_store) < n_trigger:
            raise DataError(f"{trigger_store.name}: {len(trigger_store)} utterances, {n_trigger} needed")
        trigger_indices = rng.choice(len(trigger_store), size=n_trigger, replace=False).tolist()
    elif len(trigger_indices) != n_trigger:
        raise DataError(f"{len(trigger_indices)} voice-trigger rows given, {n_trigger} needed")

    batch = Batch()
    if spec.speakers_per_batch:
        chosen = rng.choice(len(eligible), size=spec.speakers_per_batch, replace=False)
        for k in chosen.tolist():
            rows = spkr_store.by_speaker[eligible[k]]
            for r in rng.choice(len(rows), size=spec.utts_per_speaker, replace=False).tolist():
                utt = spkr_store[rows[r]]
                drop = bool(rng.random() < spec.drop_prob)
                batch.utterances.append(drop_keyword_segment(utt, drop, spec.drop_mode))
                batch.sources.append(Source.SPEAKER_ID)
    for i in trigger_indices:
        batch.utterances.append(trigger_store[int(i)])
        batch.sources.append(Source.VOICE_TRIGGER)
    return batch


class SamplerService:
    """Epoch iterator: one pass over the voice-trigger store, speaker-ID data drawn at random"""

    def __init__(self, spkr_store: UtteranceStore, trigger_store: UtteranceStore, spec: BatchSpec):
        self.spkr_store = spkr_store
        self.trigger_store = trigger_store
        self.spec = spec

    def batches_per_epoch(self) -> int:
        n = self.spec.trigger_utts
        if n == 0:
            return max(1, len(self.spkr_store) // max(self.spec.spkr_utts, 1))
        return len(self.trigger_store) // n

    def epoch(self, rng: np.random.Generator) -> Iterator[Batch]:
        """Yield the batches of one epoch (a trailing partial chunk is skipped)"""
        n = self.spec.trigger_utts
        if n and len(self.trigger_store) < n:
            raise DataError(f"{self.trigger_store.name}: {len(self.trigger_store)} utterances, {n} needed")
        order = rng.permutation(len(self.trigger_store)).tolist() if n else []
        for b in range(self.batches_per_epoch()):
            rows = order[b * n:(b + 1) * n] if n else []
            yield compose_batch(self.spkr_store, self.trigger_store, self.spec, rng, rows)
