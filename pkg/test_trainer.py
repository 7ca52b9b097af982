# test_trainer.py
"""
TriggerTune - Trainer Tests
Learning-rate schedule, Adam steps, gradient verification of the full objective and the freeze contract
"""
import csv
import math

import numpy as np
import pytest
import torch

from conftest import tiny_experiment
from models.config import LossWeights, LrSchedule
from services.experiment_service import ExperimentService
from services.sampler_service import SamplerService
from services.synth_service import SynthService
from services.training_service import (
    METRICS_HEADER, BatchMeta, TrainingService, TrainRegime, adam_step, mtl_breakdown,
)
from utils.checkpoint import encoder_checksum
from utils.errors import NumericalError
from utils.gradcheck import grad_check
from utils.losses import build_pairs
from utils.schedule import lr_at
from utils.transformer import build_model

ALL_TERMS = frozenset({"phone", "phrase", "spkr", "metric"})


class TestSchedule:
    def test_knot_values(self):
        assert lr_at(2.0) == pytest.approx(1e-3, abs=1e-15)
        assert lr_at(27.0) == pytest.approx(7e-4, abs=1e-15)
        assert lr_at(40.0) >= 1e-7
        assert lr_at(0.0) == 1e-7

    @pytest.mark.parametrize("knot", [2.0, 27.0])
    def test_continuity_at_knots(self, knot):
        assert abs(lr_at(knot - 1e-13) - lr_at(knot + 1e-13)) < 1e-12

    def test_floor(self):
        assert lr_at(500.0) == 1e-7

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(-1.0)

    def test_compressed_schedule_keeps_its_shape(self):
        sched = LrSchedule().compressed(10)
        assert lr_at(0.5, sched) == pytest.approx(lr_at(2.0), abs=1e-15)
        assert lr_at(6.75, sched) == pytest.approx(lr_at(27.0), abs=1e-15)
        assert lr_at(8.0, sched) == pytest.approx(lr_at(32.0), rel=1e-12)


class TestAdamStep:
    def test_first_step_moves_by_lr_times_sign(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        optimizer = torch.optim.Adam([p], lr=0.0, foreach=False)
        p.grad = torch.tensor([0.5, -3.0])
        assert adam_step(optimizer, 0.1)
        expected = torch.tensor([1.0, -2.0]) - 0.1 * p.grad / (p.grad.abs() + 1e-8)
        assert torch.allclose(p.detach(), expected, atol=1e-12)

    def test_non_finite_gradient_aborts_without_update(self):
        p = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
        optimizer = torch.optim.Adam([p], lr=0.0, foreach=False)
        p.grad = torch.tensor([float("inf"), 0.0])
        with pytest.raises(NumericalError):
            adam_step(optimizer, 0.1)
        assert p.detach().tolist() == [1.0, 2.0]

    def test_no_gradients_skips_the_step(self):
        p = torch.nn.Parameter(torch.tensor([1.0]))
        optimizer = torch.optim.Adam([p], lr=0.0, foreach=False)
        assert not adam_step(optimizer, 0.1)

    def test_zero_gradient_counts_a_step_without_moving(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        optimizer = torch.optim.Adam([p], lr=0.0, foreach=False)
        p.grad = torch.zeros(2)
        assert adam_step(optimizer, 0.1)
        assert p.detach().tolist() == [1.0, -2.0]
        assert float(optimizer.state[p]["step"]) == 1.0

    def test_minimises_a_parabola(self):
        x = torch.nn.Parameter(torch.tensor([1.0]))
        optimizer = torch.optim.Adam([x], lr=0.0, foreach=False)
        for _ in range(200):
            optimizer.zero_grad(set_to_none=True)
            (x ** 2).sum().backward()
            adam_step(optimizer, 0.1)
        assert abs(x.item()) < 0.1


@pytest.fixture
def objective(tiny_model_cfg):
    """Full fine-tune objective on a batch of 6 with 4 encoder frames"""
    torch.manual_seed(0)
    model = build_model(tiny_model_cfg, seed=0)
    x = torch.randn(6, 4, 12)
    lengths = torch.tensor([4, 4, 3, 4, 2, 4])
    speakers = ["a", "a", "b", "b", None, None]
    phrase = [1, 1, 1, 0, 1, 0]
    meta = BatchMeta(
        phonemes=[None, None, None, None, (0, 1), (2,)],
        phrase=torch.tensor([float(y) for y in phrase]),
        speakers=speakers,
        speaker_targets=torch.tensor([0, 0, 1, 1, -1, -1]),
    )
    pairs = build_pairs(speakers, phrase)
    regime = TrainRegime("check", tiny_model_cfg.tap_layer, ALL_TERMS, freeze_encoder=False)

    def loss_fn():
        generator = torch.Generator().manual_seed(0)
        return mtl_breakdown(model, x, lengths, meta, regime, LossWeights(), pairs, generator).total

    return model, loss_fn


class TestGradients:
    def test_full_objective_matches_finite_differences(self, objective):
        model, loss_fn = objective
        tensors = dict(model.named_parameters())
        report = grad_check(loss_fn, tensors, tolerance=1e-4, samples_per_tensor=4)
        assert set(report.per_tensor) == set(tensors)
        assert report.passed, max(report.per_tensor.items(), key=lambda kv: kv[1])

    def test_corrupted_gradients_are_caught(self, objective):
        model, loss_fn = objective
        tensors = {"phrase_head.weight": model.phrase_head.weight, "metric_a": model.metric_a}
        grads = torch.autograd.grad(loss_fn(), list(tensors.values()))
        corrupted = {name: 2.0 * g for name, g in zip(tensors, grads)}
        report = grad_check(loss_fn, tensors, samples_per_tensor=None, analytic=corrupted)
        assert not report.passed

    def test_frozen_encoder_gets_no_gradient(self, objective, tiny_model_cfg):
        model, _ = objective
        model.freeze_encoder()
        regime = TrainRegime("frozen", tiny_model_cfg.tap_layer, frozenset({"phrase", "spkr", "metric"}), True)
        meta = BatchMeta([None] * 2, torch.tensor([1.0, 1.0]), ["a", "a"], torch.tensor([0, 0]))
        breakdown = mtl_breakdown(model, torch.randn(2, 3, 12), torch.tensor([3, 3]), meta, regime, LossWeights(),
                                  build_pairs(["a", "a"], [1, 1]), torch.Generator().manual_seed(0))
        breakdown.total.backward()
        assert all(p.grad is None for _, p in model.encoder_named_parameters())
        assert model.queries.grad is not None

    def test_grad_check_needs_float64(self):
        t = torch.ones(2, dtype=torch.float32, requires_grad=True)
        with pytest.raises(NumericalError):
            grad_check(lambda: t.sum(), {"t": t})


class TestTrainingService:
    @pytest.fixture
    def cfg(self, tmp_path):
        return tiny_experiment(tmp_path / "data", tmp_path / "runs")

    def test_baseline_then_finetune_preserves_the_encoder(self, cfg, speaker_store, trigger_store, tmp_path):
        trainer = TrainingService(cfg)
        baseline = trainer.train_baseline(trigger_store, seed=1, metrics_path=tmp_path / "base.tsv")
        assert baseline.steps == math.ceil(len(trigger_store) / cfg.training.baseline_batch_size)
        assert all(np.isfinite(baseline.epoch_losses))

        before = encoder_checksum(baseline.model)
        tuned = trainer.finetune(baseline.model, speaker_store, trigger_store, seed=1,
                                 metrics_path=tmp_path / "tune.tsv")
        assert encoder_checksum(tuned.model) == before
        assert encoder_checksum(baseline.model) == before
        assert tuned.model.cfg.tap_layer == cfg.training.finetune_tap_layer
        changed = [
            not torch.equal(p, q)
            for (_, p), (_, q) in zip(baseline.model.decoder_named_parameters(), tuned.model.decoder_named_parameters())
        ]
        assert any(changed)

    def test_same_seed_reproduces_the_weights(self, cfg, trigger_store):
        a = TrainingService(cfg).train_baseline(trigger_store, seed=4).model
        b = TrainingService(cfg).train_baseline(trigger_store, seed=4).model
        assert encoder_checksum(a) == encoder_checksum(b)

    def test_metrics_log_layout(self, cfg, speaker_store, trigger_store, tmp_path):
        trainer = TrainingService(cfg)
        baseline = trainer.train_baseline(trigger_store, seed=1)
        path = tmp_path / "tune.tsv"
        trainer.finetune(baseline.model, speaker_store, trigger_store, seed=1, metrics_path=path)
        with open(path, encoding="utf-8") as f:
            rows = list(csv.reader(f, delimiter="\t"))
        assert tuple(rows[0]) == METRICS_HEADER
        assert len(rows) == 1 + len(trigger_store) // cfg.batch.trigger_utts
        # phone is inactive in fine-tuning
        assert all(float(r[METRICS_HEADER.index("phone")]) == 0.0 for r in rows[1:])

    def test_zero_gamma_excludes_the_metric_term(self, tmp_path, speaker_store, trigger_store):
        cfg = tiny_experiment(tmp_path / "data", tmp_path / "runs", losses={"gamma": 0.0})
        trainer = TrainingService(cfg)
        baseline = trainer.train_baseline(trigger_store, seed=1)
        path = tmp_path / "tune.tsv"
        trainer.finetune(baseline.model, speaker_store, trigger_store, seed=1, metrics_path=path)
        with open(path, encoding="utf-8") as f:
            rows = list(csv.DictReader(f, delimiter="\t"))
        for row in rows:
            assert float(row["metric"]) > 0.0
            assert float(row["total"]) == pytest.approx(float(row["phrase"]) + float(row["spkr"]), abs=1e-12)

    def test_too_many_speakers_for_the_head(self, tmp_path, speaker_store, trigger_store):
        from utils.errors import ConfigError

        cfg = tiny_experiment(tmp_path / "data", tmp_path / "runs", model={"speaker_classes": 3})
        trainer = TrainingService(cfg)
        baseline = trainer.train_baseline(trigger_store, seed=1)
        with pytest.raises(ConfigError):
            trainer.finetune(baseline.model, speaker_store, trigger_store, seed=1)

    def test_decode_accuracy_is_a_ratio(self, cfg, trigger_store):
        trainer = TrainingService(cfg)
        model = trainer.train_baseline(trigger_store, seed=1).model
        assert 0.0 <= trainer.decode_accuracy(model, trigger_store) <= 1.0

    def test_without_decoder_losses_nothing_moves(self, cfg, speaker_store, trigger_store):
        trainer = TrainingService(cfg)
        baseline = trainer.train_baseline(trigger_store, seed=1)
        tuned = trainer.finetune(baseline.model, speaker_store, trigger_store, seed=1,
                                 regime=TrainRegime.finetune(cfg, active=()))
        assert tuned.steps > 0
        for (name, p), (_, q) in zip(baseline.model.named_parameters(), tuned.model.named_parameters()):
            assert torch.equal(p, q), name


@pytest.fixture
def corpus_cfg(tmp_path):
    """Synthetic corpus large enough for the stage-level learning checks"""
    cfg = tiny_experiment(
        tmp_path / "data", tmp_path / "runs",
        synth={"trigger_utts": 80},
        training={"baseline_epochs": 8, "finetune_epochs": 4},
        losses={"gamma": 1.0},
    )
    synth = SynthService(cfg.synth)
    synth.write_corpus(synth.gen_corpus(), cfg.paths.data_dir)
    return cfg


def mean_metric_loss(trainer, model, batches, regime) -> float:
    with torch.no_grad():
        values = [
            float(trainer.batch_breakdown(model, b, regime, np.random.default_rng(1), training=False).metric)
            for b in batches
        ]
    return float(np.mean(values))


class TestStages:
    def test_decode_check_is_held_out_of_training(self, corpus_cfg):
        experiments = ExperimentService(corpus_cfg)
        trigger, _ = experiments.load_training_data()
        check = experiments.load_decode_check()
        assert len(check) == 8
        assert not {u.utt_id for u in trigger} & {u.utt_id for u in check}
        assert len(trigger) + len(check) == corpus_cfg.synth.trigger_utts

    def test_baseline_learns_and_decodes_above_chance(self, corpus_cfg):
        outcome = ExperimentService(corpus_cfg).train_baseline(seed=1)
        losses = outcome.summary["epoch_losses"]
        assert losses[-1] < losses[0]
        assert outcome.summary["decode_check_utts"] == 8
        assert outcome.summary["phoneme_accuracy"] > 1.0 / corpus_cfg.model.phoneme_classes

    def test_finetuning_lowers_the_metric_loss(self, corpus_cfg):
        trigger, spkr = ExperimentService(corpus_cfg).load_training_data()
        trainer = TrainingService(corpus_cfg)
        baseline = trainer.train_baseline(trigger, seed=1).model
        tuned = trainer.finetune(baseline, spkr, trigger, seed=1).model

        sampler = SamplerService(spkr, trigger, corpus_cfg.batch)
        batches = [batch.utterances for batch in sampler.epoch(np.random.default_rng(5))]
        regime = TrainRegime.finetune(corpus_cfg, active={"metric"})
        before = mean_metric_loss(trainer, baseline, batches, regime)
        after = mean_metric_loss(trainer, tuned, batches, regime)
        assert after < before
