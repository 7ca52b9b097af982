# services/training_service.py
"""
TriggerTune - Training Service
Multi-task loss assembly, Adam steps, baseline training and decoder fine-tuning
"""
import copy
import csv
import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from models.config import ExperimentConfig, LossWeights, LrSchedule
from services.sampler_service import SamplerService, Utterance, UtteranceStore
from utils.ctc import ctc_forward, greedy_decode, phoneme_accuracy, required_frames
from utils.errors import ConfigError, DataError, DivergenceError, NumericalError
from utils.features import FeaturePipeline, FeatureSequence, NormalizerStats, collate, fit_normalizer
from utils.losses import LOSS_TERMS, LossBreakdown, PairSets, build_pairs, metric_loss, phrase_ce, \
    speaker_ce, subsample_negatives, total_loss
from utils.schedule import lr_at
from utils.transformer import TriggerTransformer, build_model

logger = logging.getLogger(__name__)

METRICS_HEADER = ("stage", "epoch", "step", "lr") + LOSS_TERMS + ("total",)

BASELINE_TERMS = frozenset({"phone", "phrase"})
FINETUNE_TERMS = frozenset({"phrase", "spkr", "metric"})

# Offsets keeping the numpy streams of the two stages apart for one seed
BASELINE_STREAM = 101
FINETUNE_STREAM = 202


@dataclass(frozen=True)
class TrainRegime:
    """Which losses train which tensors, and where the decoder taps the encoder"""
    stage: str
    tap: int
    active: FrozenSet[str]
    freeze_encoder: bool

    @classmethod
    def baseline(cls, cfg: ExperimentConfig) -> "TrainRegime":
        return cls("baseline", cfg.model.enc_blocks, BASELINE_TERMS, False)

    @classmethod
    def finetune(cls, cfg: ExperimentConfig, active: Optional[Iterable[str]] = None,
                 tap: Optional[int] = None, freeze_encoder: bool = True, stage: str = "finetune") -> "TrainRegime":
        return cls(
            stage,
            tap or cfg.training.finetune_tap_layer,
            frozenset(FINETUNE_TERMS if active is None else active),
            freeze_encoder,
        )


@dataclass
class BatchMeta:
    """Labels of one prepared batch"""
    phonemes: List[Optional[Tuple[int, ...]]]
    phrase: torch.Tensor
    speakers: List[Optional[str]]
    speaker_targets: torch.Tensor


@dataclass
class TrainingResult:
    model: TriggerTransformer
    epoch_losses: List[float] = field(default_factory=list)
    steps: int = 0
    metrics_path: Optional[Path] = None


def batch_meta(utterances: Sequence[Utterance], speaker_index: Optional[Dict[str, int]] = None) -> BatchMeta:
    """Collect labels; utterances without a known speaker get target -1"""
    speaker_index = speaker_index or {}
    return BatchMeta(
        phonemes=[u.phoneme_labels for u in utterances],
        phrase=torch.tensor([float(u.phrase_label) for u in utterances]),
        speakers=[u.speaker_id for u in utterances],
        speaker_targets=torch.tensor([speaker_index.get(u.speaker_id, -1) for u in utterances], dtype=torch.long),
    )


def phone_term(log_probs: torch.Tensor, lengths: torch.Tensor, phonemes: Sequence[Optional[Sequence[int]]],
               blank: int) -> torch.Tensor:
    """Mean CTC loss over utterances with alignable phoneme labels; zero if none"""
    rows = [
        i for i, p in enumerate(phonemes)
        if p is not None and len(p) > 0 and required_frames(p) <= int(lengths[i])
    ]
    if not rows:
        return log_probs.new_zeros(())
    idx = torch.tensor(rows, dtype=torch.long)
    losses = ctc_forward(log_probs[idx], lengths[idx], [phonemes[i] for i in rows], blank)
    return losses.mean()


def mtl_breakdown(model: TriggerTransformer, x: torch.Tensor, lengths: torch.Tensor, meta: BatchMeta,
                  regime: TrainRegime, weights: LossWeights, pairs: Optional[PairSets],
                  generator: Optional[torch.Generator] = None, training: bool = True) -> LossBreakdown:
    """
    Evaluate the multi-task objective on one prepared batch

    The phone term averages CTC over utterances carrying phoneme labels, the
    speaker term averages over utterances with a known speaker class, the phrase
    term covers every utterance and the metric term uses `pairs`.

    Args:
        model (TriggerTransformer): Network
        x (torch.Tensor): B x T' x input_dim padded features
        lengths (torch.Tensor): (B,) valid frames
        meta (BatchMeta): Labels
        regime (TrainRegime): Active terms, tap layer and encoder freezing
        weights (LossWeights): alpha, beta, gamma
        pairs (PairSets, optional): Metric pairs; required when "metric" is active
        generator (torch.Generator, optional): Speaker-dropout mask source
        training (bool): Apply speaker dropout

    Returns:
        LossBreakdown: Terms and total
    """
    zero = x.new_zeros(())
    terms = {name: zero for name in LOSS_TERMS}
    if not regime.active:
        return total_loss(**terms, weights=weights, active=regime.active)

    grad_ctx = torch.no_grad() if regime.freeze_encoder else nullcontext()
    with grad_ctx:
        enc = model.encoder_forward(x, lengths)
    if "phone" in regime.active:
        terms["phone"] = phone_term(enc.log_posteriors, lengths, meta.phonemes, model.cfg.blank_index)

    if regime.active & FINETUNE_TERMS:
        emb = model.decoder_forward(enc.tap(regime.tap), lengths)
        if "phrase" in regime.active:
            terms["phrase"] = phrase_ce(model.phrase_logit(emb), meta.phrase)
        if "spkr" in regime.active:
            known = meta.speaker_targets >= 0
            if torch.any(known):
                logits = model.speaker_logits(emb[known], training=training, generator=generator)
                terms["spkr"] = speaker_ce(logits, meta.speaker_targets[known])
        if "metric" in regime.active:
            if pairs is None:
                raise ValueError("metric loss is active but no pairs were given")
            terms["metric"] = metric_loss(emb, pairs, model.metric_a, model.metric_b)
    return total_loss(**terms, weights=weights, active=regime.active)


def adam_step(optimizer: torch.optim.Optimizer, lr: float, clip_norm: Optional[float] = None) -> bool:
    """
    Apply one Adam update at learning rate `lr`

    Returns:
        bool: False when no parameter received a gradient (step skipped)

    Raises:
        NumericalError: if any gradient is non-finite; no parameter is touched
    """
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    if not params:
        return False
    for p in params:
        if not torch.all(torch.isfinite(p.grad)):
            raise NumericalError("non-finite gradient; step aborted")
    if clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, clip_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return True


def make_optimizer(params: Iterable[torch.nn.Parameter], cfg: ExperimentConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        list(params), lr=0.0, betas=tuple(cfg.training.adam_betas), eps=cfg.training.adam_eps, foreach=False,
    )


class MetricsLog:
    """Tab-separated per-step training log"""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path is not None else None
        self._file = None
        self._writer = None

    def __enter__(self) -> "MetricsLog":
        if self.path is not None:
            exists = self.path.is_file() and self.path.stat().st_size > 0
            self._file = open(self.path, "a", newline="", encoding="utf-8")
            self._writer = csv.writer(self._file, delimiter="\t", lineterminator="\n")
            if not exists:
                self._writer.writerow(METRICS_HEADER)
        return self

    def write(self, stage: str, epoch: int, step: int, lr: float, losses: Dict[str, float]) -> None:
        if self._writer is not None:
            self._writer.writerow(
                [stage, epoch, step, repr(lr)] + [repr(losses[k]) for k in LOSS_TERMS + ("total",)]
            )

    def __exit__(self, *exc) -> None:
        if self._file is not None:
            self._file.close()


class TrainingService:
    """
    Two-stage trainer

    Stage one trains the whole network on voice-trigger data with the phone and
    phrase losses. Stage two copies the baseline, freezes the encoder and trains
    the decoder side on mixed batches with the phrase, speaker and metric losses.

    Example:
        trainer = TrainingService(cfg)
        baseline = trainer.train_baseline(trigger_store, seed=1).model
        adapted = trainer.finetune(baseline, spkr_store, trigger_store, seed=1).model
    """

    def __init__(self, cfg: ExperimentConfig, normalizer: Optional[NormalizerStats] = None):
        self.cfg = cfg
        self.normalizer = normalizer
        self._pipeline: Optional[FeaturePipeline] = None
        self._cache: Dict[Tuple[str, bool], FeatureSequence] = {}
        if normalizer is not None:
            self._pipeline = FeaturePipeline(normalizer, cfg.features)

    # Features

    def fit_normalizer(self, store: UtteranceStore) -> NormalizerStats:
        """Fit global statistics on the raw features of a store and reset the cache"""
        self.normalizer = fit_normalizer((u.features for u in store), self.cfg.features.std_floor)
        self._pipeline = FeaturePipeline(self.normalizer, self.cfg.features)
        self._cache.clear()
        return self.normalizer

    @property
    def pipeline(self) -> FeaturePipeline:
        if self._pipeline is None:
            raise DataError("no feature normalizer; fit one on the training data first")
        return self._pipeline

    def process(self, utt: Utterance) -> FeatureSequence:
        key = (utt.utt_id, utt.dropped)
        if key not in self._cache:
            self._cache[key] = self.pipeline(utt.features)
        return self._cache[key]

    def prepare(self, utterances: Sequence[Utterance]) -> Tuple[torch.Tensor, torch.Tensor]:
        return collate([self.process(u) for u in utterances], torch.get_default_dtype())

    def batch_breakdown(self, model: TriggerTransformer, utterances: Sequence[Utterance], regime: TrainRegime,
                        rng: np.random.Generator, generator: Optional[torch.Generator] = None,
                        speaker_index: Optional[Dict[str, int]] = None, training: bool = True) -> LossBreakdown:
        """Prepare features, labels and balanced pairs for a batch, then evaluate the objective"""
        x, lengths = self.prepare(utterances)
        meta = batch_meta(utterances, speaker_index)
        pairs = None
        if "metric" in regime.active:
            pairs = build_pairs(meta.speakers, meta.phrase.long().tolist(), self.cfg.losses.strict_pairs)
            pairs = subsample_negatives(pairs, rng)
        return mtl_breakdown(model, x, lengths, meta, regime, self.cfg.losses, pairs, generator, training)

    # Stages

    def _run_stage(self, model: TriggerTransformer, regime: TrainRegime, epochs: int,
                   epoch_batches: Callable[[int], List[List[Utterance]]], rng: np.random.Generator,
                   generator: torch.Generator, speaker_index: Optional[Dict[str, int]],
                   metrics_path: Optional[Union[str, Path]]) -> TrainingResult:
        sched: LrSchedule = self.cfg.schedule.compressed(epochs)
        if regime.freeze_encoder:
            model.freeze_encoder()
        trainable = [p for p in model.parameters() if p.requires_grad]
        optimizer = make_optimizer(trainable, self.cfg)
        result = TrainingResult(model=model, metrics_path=Path(metrics_path) if metrics_path else None)

        logger.info("%s: %d epochs, tap %d, losses %s", regime.stage, epochs, regime.tap, sorted(regime.active))
        model.train()
        with MetricsLog(metrics_path) as log:
            for epoch in range(epochs):
                batches = epoch_batches(epoch)
                if not batches:
                    raise DataError(f"{regime.stage}: an epoch produced no batches")
                totals = []
                progress = tqdm(
                    batches, desc=f"{regime.stage} {epoch + 1}/{epochs}", leave=False,
                    disable=not self.cfg.training.show_progress,
                )
                for k, utterances in enumerate(progress):
                    lr = lr_at(epoch + k / len(batches), sched)
                    breakdown = self.batch_breakdown(model, utterances, regime, rng, generator, speaker_index)
                    losses = breakdown.as_floats()
                    if not np.all(np.isfinite(list(losses.values()))):
                        raise DivergenceError(
                            f"{regime.stage} diverged", dict(epoch=epoch + 1, step=result.steps, lr=lr, **losses)
                        )
                    optimizer.zero_grad(set_to_none=True)
                    if breakdown.total.requires_grad:
                        breakdown.total.backward()
                    try:
                        adam_step(optimizer, lr, self.cfg.training.grad_clip_norm)
                    except NumericalError as e:
                        raise DivergenceError(
                            f"{regime.stage}: {e}", dict(epoch=epoch + 1, step=result.steps, lr=lr, **losses)
                        ) from e
                    log.write(regime.stage, epoch + 1, result.steps, lr, losses)
                    result.steps += 1
                    totals.append(losses["total"])
                    progress.set_postfix(loss=f"{losses['total']:.4f}")
                result.epoch_losses.append(float(np.mean(totals)))
                logger.info("%s epoch %d/%d: mean loss %.4f", regime.stage, epoch + 1, epochs, result.epoch_losses[-1])
        model.eval()
        return result

    def train_baseline(self, trigger_store: UtteranceStore, seed: int,
                       metrics_path: Optional[Union[str, Path]] = None) -> TrainingResult:
        """
        Train the speaker-independent baseline on voice-trigger data

        Args:
            trigger_store (UtteranceStore): Phoneme/phrase-labelled utterances
            seed (int): Initialisation, batch order and dropout seed
            metrics_path (Union[str, Path], optional): Per-step metrics log

        Returns:
            TrainingResult: Trained model and per-epoch mean losses
        """
        if len(trigger_store) == 0:
            raise DataError("baseline training needs a non-empty voice-trigger store")
        if self.normalizer is None:
            self.fit_normalizer(trigger_store)
        model = build_model(self.cfg.model, seed)
        rng = np.random.default_rng([seed, BASELINE_STREAM])
        generator = torch.Generator().manual_seed(seed)
        size = self.cfg.training.baseline_batch_size
        utterances = trigger_store.utterances

        def epoch_batches(_epoch: int) -> List[List[Utterance]]:
            order = rng.permutation(len(utterances))
            return [[utterances[i] for i in order[s:s + size]] for s in range(0, len(order), size)]

        return self._run_stage(
            model, TrainRegime.baseline(self.cfg), self.cfg.training.baseline_epochs,
            epoch_batches, rng, generator, None, metrics_path,
        )

    def finetune(self, baseline: TriggerTransformer, spkr_store: UtteranceStore, trigger_store: UtteranceStore,
                 seed: int, regime: Optional[TrainRegime] = None,
                 metrics_path: Optional[Union[str, Path]] = None, epochs: Optional[int] = None) -> TrainingResult:
        """
        Fine-tune a copy of `baseline` on mixed speaker-ID / voice-trigger batches

        The default regime freezes the encoder, taps block finetune_tap_layer and
        trains with the phrase, speaker and metric losses.
        """
        regime = regime or TrainRegime.finetune(self.cfg)
        if len(spkr_store.speakers) > self.cfg.model.speaker_classes:
            raise ConfigError(
                f"{len(spkr_store.speakers)} training speakers exceed model.speaker_classes "
                f"{self.cfg.model.speaker_classes}"
            )
        if self.normalizer is None:
            raise DataError("fine-tuning needs the baseline feature normalizer")
        model = copy.deepcopy(baseline)
        model.cfg = model.cfg.model_copy(update={"tap_layer": regime.tap})
        rng = np.random.default_rng([seed, FINETUNE_STREAM])
        generator = torch.Generator().manual_seed(seed)
        sampler = SamplerService(spkr_store, trigger_store, self.cfg.batch)

        def epoch_batches(_epoch: int) -> List[List[Utterance]]:
            return [batch.utterances for batch in sampler.epoch(rng)]

        return self._run_stage(
            model, regime, epochs or self.cfg.training.finetune_epochs,
            epoch_batches, rng, generator, spkr_store.speaker_index, metrics_path,
        )

    def train_from_scratch(self, spkr_store: UtteranceStore, trigger_store: UtteranceStore, seed: int,
                           regime: TrainRegime, metrics_path: Optional[Union[str, Path]] = None) -> TrainingResult:
        """Train a freshly initialised network directly on mixed batches"""
        if self.normalizer is None:
            self.fit_normalizer(trigger_store)
        fresh = build_model(self.cfg.model, seed)
        epochs = self.cfg.training.baseline_epochs + self.cfg.training.finetune_epochs
        return self.finetune(fresh, spkr_store, trigger_store, seed, regime, metrics_path, epochs)

    # Diagnostics

    def decode_accuracy(self, model: TriggerTransformer, store: UtteranceStore) -> float:
        """Greedy CTC phoneme accuracy over the store's phoneme-labelled utterances"""
        labelled = [u for u in store if u.phoneme_labels]
        if not labelled:
            return 0.0
        hypotheses = []
        with torch.no_grad():
            for utt in labelled:
                x, lengths = self.prepare([utt])
                out = model.encoder_forward(x, lengths)
                hypotheses.append(greedy_decode(out.log_posteriors[0, : int(lengths[0])], model.cfg.blank_index))
        return phoneme_accuracy(hypotheses, [list(u.phoneme_labels) for u in labelled])
