# test_eval.py
"""
TriggerTune - Evaluation Tests
DET sweeps, operating points and the repeated-enrollment protocol
"""
import csv

import numpy as np
import pytest

from conftest import make_utterance
from models.config import FeatureConfig, InferenceConfig, ProtocolConfig
from services.evaluation_service import BASE_SCORERS, EvaluationService, fused_name, group_by_speaker
from services.inference_service import InferenceService
from utils.det import DET_HEADER, det_curve, frr_at_fa, rates_at
from utils.errors import DataError
from utils.features import FeaturePipeline, NormalizerStats
from utils.transformer import build_model


class TestDetCurve:
    def test_random_sets_are_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            pos = rng.normal(1.0, 1.0, size=int(rng.integers(1, 12)))
            neg = rng.normal(0.0, 1.0, size=int(rng.integers(1, 12)))
            curve = det_curve(pos, neg, float(rng.uniform(0.1, 5.0)))
            assert curve.is_monotone()
            assert np.all((curve.frr >= 0) & (curve.frr <= 1))

    def test_increasing_transform_keeps_the_rates(self):
        rng = np.random.default_rng(1)
        pos = rng.integers(0, 40, size=30).astype(float)
        neg = rng.integers(0, 40, size=50).astype(float)
        base = det_curve(pos, neg, 2.0)
        for transform in (lambda s: 4.0 * s, lambda s: np.exp(s / 7.0)):
            other = det_curve(transform(pos), transform(neg), 2.0)
            assert np.array_equal(base.frr, other.frr)
            assert np.array_equal(base.fa_per_hr, other.fa_per_hr)

    def test_rates_at_example(self):
        frr, fa = rates_at([0.9, 0.8, 0.2], [0.1, 0.7], 1.0, [0.75])
        assert frr.tolist() == pytest.approx([1 / 3])
        assert fa.tolist() == [0.0]

    def test_ties_are_accepted(self):
        frr, fa = rates_at([0.5], [0.5], 2.0, [0.5])
        assert frr.tolist() == [0.0]
        assert fa.tolist() == [0.5]

    def test_thresholds_are_the_distinct_scores(self):
        curve = det_curve([0.3, 0.3, 0.9], [0.1, 0.9], 1.0)
        assert curve.thresholds.tolist() == [0.1, 0.3, 0.9]

    @pytest.mark.parametrize("pos,neg,hours", [([], [0.1], 1.0), ([0.1], [], 1.0), ([0.1], [0.2], 0.0)])
    def test_invalid_inputs(self, pos, neg, hours):
        with pytest.raises(DataError):
            det_curve(pos, neg, hours)

    def test_non_finite_scores(self):
        with pytest.raises(DataError):
            det_curve([float("nan")], [0.0], 1.0)

    def test_tsv_layout(self, tmp_path):
        path = det_curve([0.9, 0.4], [0.1], 1.0).to_tsv(tmp_path / "c.tsv")
        rows = path.read_text(encoding="utf-8").splitlines()
        assert tuple(rows[0].split("\t")) == DET_HEADER
        assert len(rows) == 4


class TestOperatingPoint:
    def test_smallest_threshold_meeting_the_target(self):
        curve = det_curve([0.6, 0.8, 0.95], [0.1, 0.5, 0.7], 1.0)
        point = frr_at_fa(curve, 0.0)
        assert point.met
        assert point.threshold == 0.8
        assert point.frr == pytest.approx(1 / 3)

    def test_unreachable_target(self):
        curve = det_curve([0.1, 0.2], [0.5, 0.9], 1.0)
        point = frr_at_fa(curve, 0.0)
        assert not point.met
        assert point.threshold == 0.9
        assert point.frr == 1.0
        assert point.fa_per_hr == 1.0


@pytest.fixture
def evaluator(tiny_model_cfg) -> EvaluationService:
    features = FeatureConfig(feature_dim=4, context_left=1, context_right=1, subsample_factor=2)
    pipeline = FeaturePipeline(NormalizerStats(mean=np.zeros(4), std=np.ones(4)), features)
    inference = InferenceService(build_model(tiny_model_cfg, seed=3), pipeline, keyword=[0, 1, 2])
    return EvaluationService(
        inference,
        ProtocolConfig(enroll_per_speaker=3, runs=2, operating_fa_per_hr=10.0, seed=4),
        InferenceConfig(mu_values=(0.0, 0.5, 1.0)),
    )


def keyword_utts(speakers, n=6, offset=0):
    return [
        make_utterance(f"{s}_{i}", speaker=s, label=1, seed=offset + 10 * k + i)
        for k, s in enumerate(speakers) for i in range(n)
    ]


def negative_utts(n=5, offset=500):
    return [make_utterance(f"neg{i}", label=0, hours=0.1, seed=offset + i) for i in range(n)]


class TestProtocol:
    def test_reports_every_scorer_per_run(self, evaluator):
        cal, ctc_cal = evaluator.fit_calibrations(keyword_utts(["v1", "v2"], offset=900), negative_utts(offset=700))
        assert ctc_cal is None
        report = evaluator.run_protocol(keyword_utts(["a", "b"]), negative_utts(), cal)
        assert list(report.scorers) == list(BASE_SCORERS) + [fused_name(mu) for mu in (0.0, 0.5, 1.0)]
        assert all(len(s.points) == 2 for s in report.scorers.values())
        # 2 speakers x (3 held-out positives + 5 negatives) per run
        assert len(report.trials) == 2 * 2 * (3 + 5)
        summary = report.summary()
        assert set(summary["scorers"]["metric"]) >= {"per_run_frr", "mean_frr", "operating_met"}

    def test_fusion_endpoints_match_the_single_scorers(self, evaluator):
        cal, _ = evaluator.fit_calibrations(keyword_utts(["v1", "v2"], offset=900), negative_utts(offset=700))
        report = evaluator.run_protocol(keyword_utts(["a", "b"]), negative_utts(), cal)
        for t in report.trials:
            assert t.scores[fused_name(0.0)] == t.scores["ctc"]
            assert t.scores[fused_name(1.0)] == t.scores["metric"]
        assert report.scorers[fused_name(0.0)].frrs == report.scorers["ctc"].frrs

    def test_same_seed_same_trials(self, evaluator):
        cal, _ = evaluator.fit_calibrations(keyword_utts(["v1", "v2"], offset=900), negative_utts(offset=700))
        a = evaluator.run_protocol(keyword_utts(["a", "b"]), negative_utts(), cal)
        b = evaluator.run_protocol(keyword_utts(["a", "b"]), negative_utts(), cal)
        assert [(t.utt_id, t.speaker, t.run, t.scores) for t in a.trials] == \
            [(t.utt_id, t.speaker, t.run, t.scores) for t in b.trials]

    def test_runs_use_different_enrollments(self, evaluator):
        cal, _ = evaluator.fit_calibrations(keyword_utts(["v1", "v2"], offset=900), negative_utts(offset=700))
        report = evaluator.run_protocol(keyword_utts(["a", "b"], n=8), negative_utts(), cal)
        held_out = [
            {t.utt_id for t in report.trials if t.run == run and t.label == 1} for run in range(2)
        ]
        assert held_out[0] != held_out[1]

    def test_speaker_with_too_few_utterances(self, evaluator):
        cal, _ = evaluator.fit_calibrations(keyword_utts(["v1", "v2"], offset=900), negative_utts(offset=700))
        with pytest.raises(DataError):
            evaluator.run_protocol(keyword_utts(["a"], n=3), negative_utts(), cal)

    def test_negatives_need_durations(self, evaluator):
        with pytest.raises(DataError):
            evaluator.fit_calibrations(keyword_utts(["v1"]), [make_utterance("n", label=0)])

    def test_positives_need_speakers(self):
        with pytest.raises(DataError):
            group_by_speaker([make_utterance("x")])

    def test_outputs_are_written(self, evaluator, tmp_path):
        cal, _ = evaluator.fit_calibrations(keyword_utts(["v1", "v2"], offset=900), negative_utts(offset=700))
        report = evaluator.run_protocol(keyword_utts(["a", "b"]), negative_utts(), cal)
        pooled = EvaluationService.write_outputs(report, tmp_path)
        assert set(pooled) == set(report.scorers)
        assert (tmp_path / "det" / "ctc_run2.tsv").is_file()
        with open(tmp_path / "scores.tsv", encoding="utf-8") as f:
            rows = list(csv.DictReader(f, delimiter="\t"))
        assert len(rows) == len(report.trials)
        assert "s_final_mu0.5" in rows[0]
        assert {r["label"] for r in rows} == {"0", "1"}
