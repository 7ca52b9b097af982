# services/evaluation_service.py
"""
TriggerTune - Evaluation Service
Repeated-enrollment protocol, per-scorer DET curves and FRR at the operating point
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.config import InferenceConfig, ProtocolConfig
from services.inference_service import Calibration, InferenceService, calibrate, fit_calibration, fuse
from services.sampler_service import Utterance
from utils.det import DetCurve, OperatingPoint, det_curve, frr_at_fa
from utils.errors import DataError

logger = logging.getLogger(__name__)

BASE_SCORERS = ("ctc", "phrase", "metric")


def fused_name(mu: float) -> str:
    return f"fused_mu{mu:g}"


@dataclass
class Trial:
    """One scored candidate segment against one enrolled speaker"""
    utt_id: str
    speaker: str
    run: int
    label: int
    hours: float
    s_ctc: float
    s_phrase: float
    raw_p: float
    scores: Dict[str, float] = field(default_factory=dict)


@dataclass
class ScorerSummary:
    """FRR at the operating point per run for one scorer"""
    name: str
    points: List[OperatingPoint] = field(default_factory=list)
    curves: List[DetCurve] = field(default_factory=list)

    @property
    def frrs(self) -> List[float]:
        return [p.frr for p in self.points]

    @property
    def mean_frr(self) -> float:
        return float(np.mean(self.frrs))

    @property
    def all_met(self) -> bool:
        return all(p.met for p in self.points)


@dataclass
class ProtocolReport:
    scorers: Dict[str, ScorerSummary]
    trials: List[Trial]
    operating_fa_per_hr: float
    calibration: Calibration
    ctc_calibration: Optional[Calibration] = None

    def summary(self) -> Dict:
        return {
            "operating_fa_per_hr": self.operating_fa_per_hr,
            "calibration": {"C": self.calibration.mean, "D": self.calibration.std},
            "ctc_calibration": (
                {"C": self.ctc_calibration.mean, "D": self.ctc_calibration.std} if self.ctc_calibration else None
            ),
            "scorers": {
                name: {
                    "per_run_frr": s.frrs,
                    "mean_frr": s.mean_frr,
                    "min_frr": min(s.frrs),
                    "max_frr": max(s.frrs),
                    "operating_met": [p.met for p in s.points],
                    "thresholds": [p.threshold for p in s.points],
                }
                for name, s in self.scorers.items()
            },
        }


def group_by_speaker(utterances: Sequence[Utterance]) -> Dict[str, List[Utterance]]:
    grouped: Dict[str, List[Utterance]] = {}
    for u in utterances:
        if u.speaker_id is None:
            raise DataError(f"{u.utt_id}: enrollment data needs speaker labels")
        grouped.setdefault(u.speaker_id, []).append(u)
    return {s: sorted(us, key=lambda u: u.utt_id) for s, us in sorted(grouped.items())}


class EvaluationService:
    """
    Evaluates a model under the repeated-enrollment protocol

    Every run samples enrollment utterances per speaker, builds anchors and
    scores the remaining keyword segments against their own speaker's anchor
    and every negative segment against every anchor. Negatives are shared by
    all runs.

    Example:
        evaluator = EvaluationService(inference, cfg.protocol, cfg.inference)
        cal, ctc_cal = evaluator.fit_calibrations(validation_pos, validation_neg)
        report = evaluator.run_protocol(eval_pos, eval_neg, cal, ctc_cal)
    """

    def __init__(self, inference: InferenceService, protocol: ProtocolConfig,
                 settings: InferenceConfig = InferenceConfig()):
        self.inference = inference
        self.protocol = protocol
        self.settings = settings

    def _check_negatives(self, negatives: Sequence[Utterance]) -> None:
        if not negatives:
            raise DataError("no negative trials")
        missing = [u.utt_id for u in negatives if u.duration_hours is None]
        if missing:
            raise DataError(f"negative trials without durations: {missing[:5]}")
        if any(u.phrase_label != 0 for u in negatives):
            raise DataError("negative trials must not contain the keyword")

    def score_run(self, run: int, by_speaker: Dict[str, List[Utterance]], negatives: Sequence[Utterance],
                  rng: np.random.Generator) -> List[Trial]:
        """Enroll every speaker once and score positives and negatives"""
        k = self.protocol.enroll_per_speaker
        anchors, held_out = {}, {}
        for speaker, utts in by_speaker.items():
            if len(utts) <= k:
                raise DataError(f"speaker {speaker} has {len(utts)} keyword utterances, more than {k} needed")
            chosen = set(rng.choice(len(utts), size=k, replace=False).tolist())
            anchors[speaker] = self.inference.enroll([utts[i] for i in sorted(chosen)])
            held_out[speaker] = [u for i, u in enumerate(utts) if i not in chosen]

        trials = []
        for speaker, anchor in anchors.items():
            for u in held_out[speaker]:
                trials.append(self._trial(u, speaker, run, 1, 0.0, anchor))
            for u in negatives:
                trials.append(self._trial(u, speaker, run, 0, u.duration_hours, anchor))
        return trials

    def _trial(self, u: Utterance, speaker: str, run: int, label: int, hours: float, anchor) -> Trial:
        encoded = self.inference.encode(u)
        return Trial(
            utt_id=u.utt_id, speaker=speaker, run=run, label=label, hours=hours,
            s_ctc=encoded.s_ctc, s_phrase=encoded.s_phrase,
            raw_p=self.inference.metric_score(anchor, u),
        )

    def fit_calibrations(self, positives: Sequence[Utterance],
                         negatives: Sequence[Utterance]) -> Tuple[Calibration, Optional[Calibration]]:
        """
        Fit C, D on validation speakers (positives and negatives pooled)

        Returns:
            Tuple[Calibration, Optional[Calibration]]: Metric calibration and, when
            standardize_ctc is set, the S_ctc calibration
        """
        if not positives:
            raise DataError("calibration needs validation keyword utterances")
        self._check_negatives(negatives)
        rng = np.random.default_rng([self.settings.calibration_seed])
        trials = self.score_run(0, group_by_speaker(positives), negatives, rng)
        metric_cal = fit_calibration(t.raw_p for t in trials)
        ctc_cal = fit_calibration(t.s_ctc for t in trials) if self.settings.standardize_ctc else None
        logger.info("calibration: C=%.6f D=%.6f", metric_cal.mean, metric_cal.std)
        return metric_cal, ctc_cal

    def run_protocol(self, positives: Sequence[Utterance], negatives: Sequence[Utterance],
                     calibration: Calibration, ctc_calibration: Optional[Calibration] = None,
                     mu_values: Optional[Sequence[float]] = None) -> ProtocolReport:
        """
        Run the repeated-enrollment protocol

        Args:
            positives (Sequence[Utterance]): Keyword utterances of the evaluation speakers
            negatives (Sequence[Utterance]): Keyword-free segments with durations
            calibration (Calibration): C, D for S_metric
            ctc_calibration (Calibration, optional): Standardisation of S_ctc before fusion
            mu_values (Sequence[float], optional): Fusion weights; defaults to the configured list

        Returns:
            ProtocolReport: Per-scorer per-run FRRs, curves and all trials
        """
        self._check_negatives(negatives)
        by_speaker = group_by_speaker(positives)
        if not by_speaker:
            raise DataError("no evaluation speakers")
        mu_values = list(self.settings.mu_values if mu_values is None else mu_values)
        names = list(BASE_SCORERS) + [fused_name(mu) for mu in mu_values]
        scorers = {name: ScorerSummary(name) for name in names}
        target = self.protocol.operating_fa_per_hr

        all_trials: List[Trial] = []
        for run in range(self.protocol.runs):
            rng = np.random.default_rng([self.protocol.seed, run])
            trials = self.score_run(run, by_speaker, negatives, rng)
            for t in trials:
                s_metric = float(calibrate(t.raw_p, calibration))
                s_ctc = float(calibrate(t.s_ctc, ctc_calibration)) if ctc_calibration else t.s_ctc
                t.scores = {"ctc": t.s_ctc, "phrase": t.s_phrase, "metric": s_metric}
                for mu in mu_values:
                    t.scores[fused_name(mu)] = float(fuse(s_ctc, s_metric, mu))
            hours = sum(t.hours for t in trials if t.label == 0)
            for name in names:
                pos = [t.scores[name] for t in trials if t.label == 1]
                neg = [t.scores[name] for t in trials if t.label == 0]
                curve = det_curve(pos, neg, hours)
                scorers[name].curves.append(curve)
                scorers[name].points.append(frr_at_fa(curve, target))
            all_trials.extend(trials)
            logger.info(
                "run %d: %s", run + 1,
                ", ".join(f"{n}={scorers[n].points[-1].frr:.4f}" for n in names),
            )
        return ProtocolReport(scorers, all_trials, target, calibration, ctc_calibration)

    @staticmethod
    def pooled_curve(report: ProtocolReport, name: str) -> DetCurve:
        """DET curve over the trials of every run together"""
        pos = [t.scores[name] for t in report.trials if t.label == 1]
        neg = [t.scores[name] for t in report.trials if t.label == 0]
        hours = sum(t.hours for t in report.trials if t.label == 0)
        return det_curve(pos, neg, hours)

    @staticmethod
    def write_outputs(report: ProtocolReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """
        Write scores.tsv, one pooled DET file per scorer and per-run DET files

        Returns:
            Dict[str, Path]: Pooled DET file per scorer
        """
        out_dir = Path(out_dir)
        det_dir = out_dir / "det"
        det_dir.mkdir(parents=True, exist_ok=True)
        names = list(report.scorers)
        fused = [n for n in names if n not in BASE_SCORERS]

        with open(out_dir / "scores.tsv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(
                ["utt_id", "speaker", "run", "label", "s_ctc", "raw_p", "s_metric", "s_phrase"]
                + [n.replace("fused_", "s_final_") for n in fused]
            )
            for t in report.trials:
                writer.writerow(
                    [t.utt_id, t.speaker, t.run, t.label, repr(t.s_ctc), repr(t.raw_p),
                     repr(t.scores["metric"]), repr(t.s_phrase)]
                    + [repr(t.scores[n]) for n in fused]
                )

        pooled = {}
        for name, summary in report.scorers.items():
            pooled[name] = EvaluationService.pooled_curve(report, name).to_tsv(det_dir / f"{name}.tsv")
            for run, curve in enumerate(summary.curves):
                curve.to_tsv(det_dir / f"{name}_run{run + 1}.tsv")
        return pooled
