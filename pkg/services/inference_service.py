# services/inference_service.py
"""
TriggerTune - Inference Service
Enrollment, speaker-adapted metric scoring, calibration and score fusion
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np
import torch

from services.sampler_service import Utterance
from utils.checkpoint import read_container, write_container
from utils.ctc import ctc_keyword_score
from utils.errors import DataError, NumericalError
from utils.features import FeaturePipeline
from utils.losses import similarity
from utils.transformer import TriggerTransformer

logger = logging.getLogger(__name__)

# S_ctc of an unalignable candidate is replaced by this floor before fusion
CTC_SCORE_FLOOR = -1e3


@dataclass(frozen=True)
class AnchorEmbedding:
    """Mean decoder embedding of a speaker's enrollment utterances"""
    values: torch.Tensor
    enrolled_count: int


@dataclass(frozen=True)
class Calibration:
    """Global mean C and standard deviation D of validation scores"""
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise NumericalError(f"calibration std must be positive, got {self.std}")


@dataclass(frozen=True)
class EncodedUtterance:
    """Speaker-independent scores and the embedding of one utterance"""
    utt_id: str
    embedding: torch.Tensor
    s_ctc: float
    s_phrase: float


def fit_calibration(scores: Iterable[float]) -> Calibration:
    """
    Mean and population std of validation scores

    Example:
        fit_calibration([0.4, 0.6])  # Calibration(mean=0.5, std=0.1)
    """
    values = np.asarray(list(scores), dtype=np.float64)
    if values.size < 2:
        raise DataError(f"calibration needs at least 2 scores, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise NumericalError("calibration scores must be finite")
    std = float(values.std())
    if std == 0.0:
        raise NumericalError("calibration scores have zero spread")
    return Calibration(mean=float(values.mean()), std=std)


def calibrate(raw, cal: Calibration):
    """S = (raw - C) / D; works on floats and arrays"""
    if not cal.std > 0:
        raise NumericalError(f"calibration std must be positive, got {cal.std}")
    return (raw - cal.mean) / cal.std


def fuse(s_ctc, s_metric, mu: float):
    """
    Convex combination (1 - mu) * S_ctc + mu * S_metric

    Example:
        fuse(-0.2, 1.3, 0.95)
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"fusion weight {mu} outside [0, 1]")
    return (1.0 - mu) * s_ctc + mu * s_metric


class InferenceService:
    """
    Scores candidate segments with a trained model

    Example:
        service = InferenceService(model, pipeline, keyword=[0, 1, 2, 3])
        anchor = service.enroll(enrollment_utterances)
        raw = service.metric_score(anchor, test_utterance)
    """

    def __init__(self, model: TriggerTransformer, pipeline: FeaturePipeline, keyword: Sequence[int],
                 tap_layer: Optional[int] = None):
        self.model = model.eval()
        self.pipeline = pipeline
        self.keyword = list(keyword)
        self.tap_layer = tap_layer or model.cfg.tap_layer
        self._encoded: Dict[str, EncodedUtterance] = {}

    def encode(self, utt: Utterance) -> EncodedUtterance:
        """Run one utterance through the network (cached by utterance id)"""
        cached = self._encoded.get(utt.utt_id)
        if cached is not None:
            return cached
        frames = torch.as_tensor(self.pipeline(utt.features).frames, dtype=torch.get_default_dtype())
        with torch.no_grad():
            out = self.model.encoder_forward(frames[None])
            embedding = self.model.decoder_forward(out.tap(self.tap_layer))[0]
            s_phrase = float(self.model.phrase_logit(embedding))
        s_ctc = ctc_keyword_score(out.log_posteriors[0], self.keyword, self.model.cfg.blank_index)
        encoded = EncodedUtterance(
            utt_id=utt.utt_id,
            embedding=embedding,
            s_ctc=max(s_ctc, CTC_SCORE_FLOOR),
            s_phrase=s_phrase,
        )
        self._encoded[utt.utt_id] = encoded
        return encoded

    def embed(self, utt: Utterance) -> torch.Tensor:
        return self.encode(utt).embedding

    def enroll(self, utterances: Sequence[Utterance]) -> AnchorEmbedding:
        """
        Anchor = elementwise mean of the enrollment embeddings

        Args:
            utterances (Sequence[Utterance]): Keyword utterances of one speaker

        Returns:
            AnchorEmbedding: Mean embedding (summed in utterance-id order)
        """
        if not utterances:
            raise DataError("enrollment needs at least one utterance")
        negatives = [u.utt_id for u in utterances if u.phrase_label != 1]
        if negatives:
            raise DataError(f"enrollment utterances must contain the keyword: {negatives}")
        ordered = sorted(utterances, key=lambda u: u.utt_id)
        stacked = torch.stack([self.embed(u) for u in ordered])
        return AnchorEmbedding(values=stacked.mean(dim=0), enrolled_count=len(ordered))

    def metric_score(self, anchor: AnchorEmbedding, test: Utterance) -> float:
        """Raw pair probability between the test embedding and the anchor"""
        with torch.no_grad():
            p = similarity(self.embed(test), anchor.values, self.model.metric_a, self.model.metric_b)
        return float(p)

    def ctc_score(self, utt: Utterance) -> float:
        return self.encode(utt).s_ctc

    def phrase_score(self, utt: Utterance) -> float:
        return self.encode(utt).s_phrase


def save_anchors(path: Union[str, Path], anchors: Dict[str, AnchorEmbedding]) -> Path:
    """Store anchors in the checkpoint container format"""
    tensors = {f"anchor.{speaker}": a.values for speaker, a in anchors.items()}
    counts = {speaker: a.enrolled_count for speaker, a in anchors.items()}
    return write_container(path, tensors, {"kind": "anchors", "enrolled_count": counts})


def load_anchors(path: Union[str, Path]) -> Dict[str, AnchorEmbedding]:
    tensors, meta = read_container(path)
    if meta.get("kind") != "anchors":
        raise DataError(f"{path} does not hold anchor embeddings")
    counts = meta.get("enrolled_count", {})
    return {
        name[len("anchor."):]: AnchorEmbedding(values=t, enrolled_count=int(counts[name[len("anchor."):]]))
        for name, t in tensors.items()
    }
