# services/experiment_service.py
"""
TriggerTune - Experiment Service
Run directories with provenance, end-to-end stage orchestration, the ablation grid and seed reproduction
"""
import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.config import ExperimentConfig
from models.manifest import Split
from services.evaluation_service import BASE_SCORERS, EvaluationService, ProtocolReport
from services.inference_service import InferenceService
from services.sampler_service import Utterance, UtteranceStore
from services.synth_service import MANIFEST_FILES
from services.training_service import TrainingResult, TrainingService, TrainRegime
from utils.checkpoint import encoder_checksum, file_checksum, load_checkpoint, save_checkpoint
from utils.errors import CheckpointError, DataError, NumericalError
from utils.features import FeaturePipeline, NormalizerStats
from utils.transformer import TriggerTransformer

logger = logging.getLogger(__name__)

PROVENANCE_FILE = "config.json"
SUMMARY_FILE = "summary.json"
# Voice-trigger utterances held out of training for the greedy-decoding check
DECODE_CHECK_FRACTION = 0.1
DECODE_CHECK_UTTS = 200
DECODE_CHECK_STREAM = 303
# Relative FRR reduction of the best fused scorer over S_ctc expected by `reproduce`
FUSION_GAIN = 0.10


def write_json(path: Union[str, Path], payload: Dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def seed_label(seeds: Union[int, Sequence[int]]) -> str:
    if isinstance(seeds, int):
        return str(seeds)
    return "_".join(str(s) for s in seeds)


class RunDirectory:
    """
    Fresh output directory `<command>-<hash8>-seed<seed>-<n>` built under a temporary name

    The directory only appears under its final name when the block exits
    cleanly; a failing command leaves nothing behind.

    Example:
        with RunDirectory("runs", "eval", cfg, seed=0) as run:
            write_json(run.path / "summary.json", {...})
        print(run.final)
    """

    def __init__(self, root: Union[str, Path], command: str, cfg: ExperimentConfig,
                 seed: Union[int, Sequence[int]], extra: Optional[Dict] = None):
        self.root = Path(root)
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.extra = extra or {}
        base = f"{command}-{cfg.config_hash()[:8]}-seed{seed_label(seed)}"
        n = 1
        while (self.root / f"{base}-{n}").exists():
            n += 1
        self.final = self.root / f"{base}-{n}"
        self.tmp = self.root / f".{self.final.name}.tmp-{os.getpid()}"
        self.path = self.tmp

    def __enter__(self) -> "RunDirectory":
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        write_json(self.tmp / PROVENANCE_FILE, {
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.echo(),
            **self.extra,
        })
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return
        os.replace(self.tmp, self.final)
        self.path = self.final
        logger.info("outputs in %s", self.final)


@dataclass
class EvaluationData:
    """Enrollment speakers and negatives, split into evaluation and validation"""
    eval_positives: List[Utterance]
    eval_negatives: List[Utterance]
    validation_positives: List[Utterance]
    validation_negatives: List[Utterance]


@dataclass(frozen=True)
class AblationVariant:
    """One row of the ablation grid"""
    name: str
    init: str
    encoder: str
    active: FrozenSet[str]
    tap: str

    def tap_layer(self, cfg: ExperimentConfig) -> int:
        return cfg.model.enc_blocks if self.tap == "last" else cfg.training.finetune_tap_layer

    def regime(self, cfg: ExperimentConfig) -> TrainRegime:
        return TrainRegime.finetune(
            cfg, active=self.active, tap=self.tap_layer(cfg),
            freeze_encoder=self.encoder == "fixed", stage=self.name,
        )

    def describe(self, cfg: ExperimentConfig) -> Dict:
        return {
            "name": self.name,
            "init": self.init,
            "encoder": self.encoder,
            "losses": sorted(self.active),
            "tap": self.tap_layer(cfg),
        }

    def row_hash(self, cfg: ExperimentConfig) -> str:
        canonical = json.dumps({"config": cfg.config_hash(), "variant": self.describe(cfg)}, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


ALL_TERMS = frozenset({"phone", "phrase", "spkr", "metric"})
DECODER_TERMS = frozenset({"phrase", "spkr", "metric"})

ABLATION_GRID: Tuple[AblationVariant, ...] = (
    AblationVariant("random_all_losses", "random", "trained", ALL_TERMS, "last"),
    AblationVariant("random_no_phone", "random", "trained", DECODER_TERMS, "last"),
    AblationVariant("fixed_last_block", "pretrained", "fixed", DECODER_TERMS, "last"),
    AblationVariant("fixed_full", "pretrained", "fixed", DECODER_TERMS, "tap"),
    AblationVariant("fixed_no_spkr", "pretrained", "fixed", frozenset({"phrase", "metric"}), "tap"),
    AblationVariant("fixed_no_metric", "pretrained", "fixed", frozenset({"phrase", "spkr"}), "tap"),
    AblationVariant("fixed_phrase_only", "pretrained", "fixed", frozenset({"phrase"}), "tap"),
    AblationVariant("finetuned_encoder", "pretrained", "finetuned", ALL_TERMS, "tap"),
)

ABLATION_COLUMNS = (
    "row", "init", "encoder", "losses", "tap", "seeds", "config_hash",
    "median_frr_ctc", "median_frr_metric", "median_frr_phrase", "frr_ctc", "frr_metric",
)


@dataclass
class StageOutcome:
    """Checkpoint and summary of one training command"""
    run_dir: Path
    checkpoint: Path
    result: TrainingResult
    summary: Dict = field(default_factory=dict)


@dataclass
class EvaluationOutcome:
    run_dir: Path
    report: ProtocolReport
    summary: Dict = field(default_factory=dict)


@dataclass
class AblationRow:
    variant: AblationVariant
    row_hash: str
    seeds: List[int] = field(default_factory=list)
    frr: Dict[str, List[float]] = field(default_factory=dict)

    def median(self, scorer: str) -> float:
        return float(np.median(self.frr[scorer]))


@dataclass
class AblationOutcome:
    run_dir: Path
    rows: List[AblationRow]


@dataclass
class ReproduceOutcome:
    run_dir: Path
    per_seed: Dict[int, Dict[str, float]]
    medians: Dict[str, float]
    checks: Dict[str, bool]


def check_freeze(baseline: TriggerTransformer, tuned: TriggerTransformer) -> str:
    """Encoder tensors of a frozen-encoder fine-tune must equal the baseline byte for byte"""
    before, after = encoder_checksum(baseline), encoder_checksum(tuned)
    if before != after:
        raise NumericalError(f"encoder tensors changed during fine-tuning ({before[:12]} -> {after[:12]})")
    return after


def directional_checks(medians: Dict[str, float]) -> Dict[str, bool]:
    """Metric beats CTC, and the best fused scorer cuts the CTC FRR by at least FUSION_GAIN"""
    ctc = medians["ctc"]
    fused = [medians[name] for name in medians if name.startswith("fused_")]
    best = min(fused) if fused else float("inf")
    return {
        "metric_below_ctc": medians["metric"] < ctc,
        "fusion_gain": ctc > 0 and (ctc - best) / ctc >= FUSION_GAIN,
    }


class ExperimentService:
    """
    Runs complete experiments from one validated configuration

    Example:
        experiments = ExperimentService(cfg)
        baseline = experiments.train_baseline()
        tuned = experiments.finetune(baseline.checkpoint)
        outcome = experiments.evaluate(tuned.checkpoint)
    """

    def __init__(self, cfg: ExperimentConfig, runs_dir: Optional[Union[str, Path]] = None):
        self.cfg = cfg
        self.runs_dir = Path(runs_dir or cfg.paths.runs_dir)
        self.data_dir = Path(cfg.paths.data_dir)
        self._trigger_split: Optional[Tuple[UtteranceStore, UtteranceStore]] = None

    # Data

    def _manifest(self, source: str) -> Path:
        path = self.data_dir / MANIFEST_FILES[source]
        if not path.is_file():
            raise DataError(f"manifest {path} not found; run `synth` first")
        return path

    def _voice_trigger_split(self) -> Tuple[UtteranceStore, UtteranceStore]:
        if self._trigger_split is None:
            trigger = UtteranceStore.from_manifest(self._manifest("voice_trigger"), self.cfg.mel, "voice_trigger")
            count = min(DECODE_CHECK_UTTS, max(1, round(DECODE_CHECK_FRACTION * len(trigger))))
            rng = np.random.default_rng([self.cfg.synth.seed, DECODE_CHECK_STREAM])
            self._trigger_split = trigger.split(count, rng)
        return self._trigger_split

    def load_training_data(self) -> Tuple[UtteranceStore, UtteranceStore]:
        """Voice-trigger (without the decode-check slice) and speaker-ID stores"""
        trigger, _ = self._voice_trigger_split()
        spkr = UtteranceStore.from_manifest(self._manifest("speaker_id"), self.cfg.mel, "speaker_id")
        return trigger, spkr

    def load_decode_check(self) -> UtteranceStore:
        """Held-out voice-trigger utterances no training stage ever sees"""
        return self._voice_trigger_split()[1]

    def load_evaluation_data(self) -> EvaluationData:
        enrolled = UtteranceStore.from_manifest(self._manifest("eval"), self.cfg.mel, "eval")
        negatives = UtteranceStore.from_manifest(self._manifest("negatives"), self.cfg.mel, "negatives")
        data = EvaluationData(
            eval_positives=[u for u in enrolled if u.split == Split.EVAL],
            eval_negatives=[u for u in negatives if u.split == Split.EVAL],
            validation_positives=[u for u in enrolled if u.split == Split.VALIDATION],
            validation_negatives=[u for u in negatives if u.split == Split.VALIDATION],
        )
        if not data.validation_positives or not data.validation_negatives:
            raise DataError("calibration needs validation speakers and validation negatives")
        return data

    # Building blocks

    def _baseline_model(self, trainer: TrainingService, trigger: UtteranceStore, seed: int,
                        out_dir: Path) -> TrainingResult:
        return trainer.train_baseline(trigger, seed, out_dir / "baseline_metrics.tsv")

    def _checkpoint_meta(self, stage: str, seed: int, **extra) -> Dict:
        return {"stage": stage, "seed": seed, "config_hash": self.cfg.config_hash(), "config": self.cfg.echo(), **extra}

    def evaluate_model(self, model: TriggerTransformer, normalizer: NormalizerStats, data: EvaluationData,
                       mu_values: Optional[Sequence[float]] = None) -> ProtocolReport:
        """Calibrate on validation speakers, then run the repeated-enrollment protocol"""
        inference = InferenceService(model, FeaturePipeline(normalizer, self.cfg.features), self.cfg.synth.keyword)
        evaluator = EvaluationService(inference, self.cfg.protocol, self.cfg.inference)
        calibration, ctc_calibration = evaluator.fit_calibrations(data.validation_positives, data.validation_negatives)
        return evaluator.run_protocol(
            data.eval_positives, data.eval_negatives, calibration, ctc_calibration, mu_values,
        )

    # Commands

    def train_baseline(self, seed: Optional[int] = None) -> StageOutcome:
        """Train the speaker-independent baseline and write baseline.ckpt"""
        seed = self.cfg.seeds.train if seed is None else seed
        trigger, check = self._voice_trigger_split()
        trainer = TrainingService(self.cfg)
        with RunDirectory(self.runs_dir, "train-baseline", self.cfg, seed) as run:
            result = trainer.train_baseline(trigger, seed, run.path / "metrics.tsv")
            ckpt = save_checkpoint(
                run.path / "baseline.ckpt", result.model, trainer.normalizer,
                **self._checkpoint_meta("baseline", seed),
            )
            summary = {
                "stage": "baseline",
                "seed": seed,
                "steps": result.steps,
                "epoch_losses": result.epoch_losses,
                "phoneme_accuracy": trainer.decode_accuracy(result.model, check),
                "decode_check_utts": len(check),
                "checkpoint_sha256": file_checksum(ckpt),
                "encoder_sha256": encoder_checksum(result.model),
            }
            write_json(run.path / SUMMARY_FILE, summary)
        return StageOutcome(run.final, run.final / "baseline.ckpt", result, summary)

    def finetune(self, baseline_path: Optional[Union[str, Path]] = None, seed: Optional[int] = None) -> StageOutcome:
        """
        Fine-tune the decoder of a baseline checkpoint on mixed batches

        Raises:
            CheckpointError: if no baseline is given or it does not match the configuration
            NumericalError: if the encoder tensors changed
        """
        seed = self.cfg.seeds.finetune if seed is None else seed
        baseline_path = baseline_path or self.cfg.paths.baseline_checkpoint
        if not baseline_path:
            raise CheckpointError("fine-tuning needs a baseline checkpoint (--baseline or [paths] baseline_checkpoint)")
        baseline = load_checkpoint(baseline_path, self.cfg.model)
        if baseline.normalizer is None:
            raise CheckpointError(f"{baseline_path} carries no feature normalizer")
        trigger, spkr = self.load_training_data()
        trainer = TrainingService(self.cfg, baseline.normalizer)
        with RunDirectory(self.runs_dir, "finetune", self.cfg, seed,
                          {"baseline": str(baseline_path), "baseline_sha256": file_checksum(baseline_path)}) as run:
            result = trainer.finetune(baseline.model, spkr, trigger, seed, metrics_path=run.path / "metrics.tsv")
            checksum = check_freeze(baseline.model, result.model)
            ckpt = save_checkpoint(
                run.path / "finetune.ckpt", result.model, baseline.normalizer,
                **self._checkpoint_meta("finetune", seed),
            )
            summary = {
                "stage": "finetune",
                "seed": seed,
                "steps": result.steps,
                "epoch_losses": result.epoch_losses,
                "tap_layer": result.model.cfg.tap_layer,
                "metric_a": float(result.model.metric_a),
                "metric_b": float(result.model.metric_b),
                "checkpoint_sha256": file_checksum(ckpt),
                "encoder_sha256": checksum,
            }
            write_json(run.path / SUMMARY_FILE, summary)
        return StageOutcome(run.final, run.final / "finetune.ckpt", result, summary)

    def evaluate(self, checkpoint: Union[str, Path], mu_values: Optional[Sequence[float]] = None) -> EvaluationOutcome:
        """Score the evaluation speakers with a checkpoint; write scores, DET files and summary.json"""
        loaded = load_checkpoint(checkpoint, self.cfg.model)
        if loaded.normalizer is None:
            raise CheckpointError(f"{checkpoint} carries no feature normalizer")
        data = self.load_evaluation_data()
        with RunDirectory(self.runs_dir, "eval", self.cfg, self.cfg.protocol.seed,
                          {"checkpoint": str(checkpoint), "checkpoint_sha256": file_checksum(checkpoint)}) as run:
            report = self.evaluate_model(loaded.model, loaded.normalizer, data, mu_values)
            EvaluationService.write_outputs(report, run.path)
            summary = dict(report.summary(), checkpoint=str(checkpoint), config_hash=self.cfg.config_hash())
            write_json(run.path / SUMMARY_FILE, summary)
        return EvaluationOutcome(run.final, report, summary)

    def ablate(self, seeds: Optional[Sequence[int]] = None,
               variants: Sequence[AblationVariant] = ABLATION_GRID) -> AblationOutcome:
        """
        Train and evaluate every ablation row for every seed

        Pretrained rows share one baseline per seed. Frozen-encoder rows are
        checked against that baseline's encoder bytes.
        """
        seeds = list(self.cfg.seeds.reproduce if seeds is None else seeds)
        trigger, spkr = self.load_training_data()
        data = self.load_evaluation_data()
        rows = [AblationRow(v, v.row_hash(self.cfg)) for v in variants]

        with RunDirectory(self.runs_dir, "ablate", self.cfg, seeds) as run:
            for seed in seeds:
                seed_dir = run.path / f"seed{seed}"
                seed_dir.mkdir()
                trainer = TrainingService(self.cfg)
                baseline = None
                for row in rows:
                    variant = row.variant
                    regime = variant.regime(self.cfg)
                    metrics = seed_dir / f"{variant.name}_metrics.tsv"
                    if variant.init == "random":
                        result = trainer.train_from_scratch(spkr, trigger, seed, regime, metrics)
                    else:
                        if baseline is None:
                            baseline = self._baseline_model(trainer, trigger, seed, seed_dir).model
                        result = trainer.finetune(baseline, spkr, trigger, seed, regime, metrics)
                        if regime.freeze_encoder:
                            check_freeze(baseline, result.model)
                    report = self.evaluate_model(result.model, trainer.normalizer, data)
                    row.seeds.append(seed)
                    for name in BASE_SCORERS:
                        row.frr.setdefault(name, []).append(report.scorers[name].mean_frr)
                    logger.info(
                        "ablation %s seed %d: ctc %.4f metric %.4f", variant.name, seed,
                        row.frr["ctc"][-1], row.frr["metric"][-1],
                    )
            self.write_ablation(rows, run.path)
        return AblationOutcome(run.final, rows)

    def write_ablation(self, rows: Sequence[AblationRow], out_dir: Path) -> Path:
        """ablation.tsv plus the same rows as JSON"""
        path = out_dir / "ablation.tsv"
        records = []
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(ABLATION_COLUMNS)
            for row in rows:
                info = row.variant.describe(self.cfg)
                writer.writerow([
                    info["name"], info["init"], info["encoder"], ",".join(info["losses"]), info["tap"],
                    ",".join(str(s) for s in row.seeds), row.row_hash,
                    repr(row.median("ctc")), repr(row.median("metric")), repr(row.median("phrase")),
                    ",".join(repr(v) for v in row.frr["ctc"]), ",".join(repr(v) for v in row.frr["metric"]),
                ])
                records.append(dict(info, seeds=row.seeds, config_hash=row.row_hash, frr=row.frr,
                                    median_frr={name: row.median(name) for name in row.frr}))
        write_json(out_dir / "ablation.json", {"config_hash": self.cfg.config_hash(), "rows": records})
        return path

    def reproduce(self, seeds: Optional[Sequence[int]] = None) -> ReproduceOutcome:
        """
        Baseline, fine-tune and evaluate once per seed; report median FRR per scorer

        The same seed drives baseline training and fine-tuning of its row.
        """
        seeds = list(self.cfg.seeds.reproduce if seeds is None else seeds)
        trigger, spkr = self.load_training_data()
        data = self.load_evaluation_data()
        per_seed: Dict[int, Dict[str, float]] = {}

        with RunDirectory(self.runs_dir, "reproduce", self.cfg, seeds) as run:
            for seed in seeds:
                seed_dir = run.path / f"seed{seed}"
                seed_dir.mkdir()
                trainer = TrainingService(self.cfg)
                baseline = self._baseline_model(trainer, trigger, seed, seed_dir).model
                tuned = trainer.finetune(baseline, spkr, trigger, seed, metrics_path=seed_dir / "finetune_metrics.tsv")
                check_freeze(baseline, tuned.model)
                save_checkpoint(seed_dir / "finetune.ckpt", tuned.model, trainer.normalizer,
                                **self._checkpoint_meta("finetune", seed))
                report = self.evaluate_model(tuned.model, trainer.normalizer, data)
                EvaluationService.write_outputs(report, seed_dir)
                per_seed[seed] = {name: s.mean_frr for name, s in report.scorers.items()}

            names = list(next(iter(per_seed.values())))
            medians = {name: float(np.median([per_seed[s][name] for s in seeds])) for name in names}
            checks = directional_checks(medians)
            write_json(run.path / SUMMARY_FILE, {
                "seeds": seeds,
                "config_hash": self.cfg.config_hash(),
                "per_seed": {str(s): v for s, v in per_seed.items()},
                "median_frr": medians,
                "checks": checks,
            })
        return ReproduceOutcome(run.final, per_seed, medians, checks)
