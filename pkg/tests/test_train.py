import numpy as np
import pytest

from minidet3d.data import synth_scenes
from minidet3d.errors import ConfigError, DivergenceError, EmptyBatch
from minidet3d.losses import LossSchedule, schedule_weights
from minidet3d.model import FusionModel, ModelConfig
from minidet3d.train import (
    AdamW,
    LOG_HEADER,
    build_training_samples,
    evaluate_model,
    format_log_row,
    run_training,
    split_by_hash,
    validation_miou,
)

MIX = {"adult": 0.5, "car": 0.5}


def small_dataset(count, seed):
    records, features = synth_scenes(count, MIX, seed=seed)
    return build_training_samples(records, {f.sample_id: f for f in features})


class TestAdamW:
    def test_converges_on_quadratic(self):
        # minimize ||x - target||^2 (weight decay pulls slightly toward zero)
        target = np.array([1.0, -2.0, 3.0])
        params = {"x": np.zeros(3)}
        opt = AdamW(params, weight_decay=0.0)
        for _ in range(2000):
            grads = {"x": 2.0 * (params["x"] - target)}
            opt.step(params, grads, lr=0.01)
        assert np.allclose(params["x"], target, atol=1e-4)

    def test_weight_decay_shrinks_stationary_point(self):
        # zero gradients: only the decoupled decay acts, scaling by
        # (1 - lr*wd) each step
        params = {"x": np.array([10.0])}
        opt = AdamW(params, weight_decay=0.1)
        for _ in range(500):
            opt.step(params, {"x": np.zeros(1)}, lr=0.05)
        assert params["x"][0] == pytest.approx(10.0 * (1 - 0.05 * 0.1) ** 500, rel=1e-9)


class TestBuildSamples:
    def test_pairs_features_with_lidar_boxes(self):
        samples = small_dataset(10, seed=1)
        assert len(samples) == 10
        for s in samples:
            assert s.fused.shape == (64,)
            assert s.gt_box.l > 0

    def test_multi_annotation_rejected(self):
        records, features = synth_scenes(2, MIX, seed=2)
        doubled = records[0].__class__(
            sample_id=records[0].sample_id,
            ego_to_global=records[0].ego_to_global,
            lidar_to_ego=records[0].lidar_to_ego,
            cameras=records[0].cameras,
            annotations=records[0].annotations * 2,
        )
        with pytest.raises(ConfigError, match="exactly one"):
            build_training_samples([doubled], {f.sample_id: f for f in features})

    def test_missing_features_rejected(self):
        records, _ = synth_scenes(2, MIX, seed=3)
        with pytest.raises(ConfigError, match="no features"):
            build_training_samples(records, {})


class TestSplit:
    def test_deterministic_and_total(self):
        samples = small_dataset(200, seed=4)
        t1, v1 = split_by_hash(samples, 0.1)
        t2, v2 = split_by_hash(samples, 0.1)
        assert [s.sample_id for s in t1] == [s.sample_id for s in t2]
        assert len(t1) + len(v1) == 200
        assert 5 <= len(v1) <= 40  # about 10%


class TestRunTraining:
    def test_loss_decreases_and_is_deterministic(self):
        samples = small_dataset(64, seed=5)
        sched = LossSchedule(transition_epoch=3, total_epochs=4, stage1_lr=2e-3, stage2_lr=2e-4)

        model_a = FusionModel(ModelConfig(seed=0))
        hist_a = run_training(model_a, samples, sched, seed=9)
        model_b = FusionModel(ModelConfig(seed=0))
        hist_b = run_training(model_b, samples, sched, seed=9)

        assert hist_a[-1].mse_loss < hist_a[0].mse_loss
        assert hist_a == hist_b
        for name in model_a.params:
            assert np.array_equal(model_a.params[name], model_b.params[name])

    def test_log_matches_schedule_weights(self):
        samples = small_dataset(32, seed=6)
        sched = LossSchedule(transition_epoch=2, total_epochs=4)
        model = FusionModel(ModelConfig(seed=1))
        history = run_training(model, samples, sched, seed=0)
        for stats in history:
            lam1, lam2, lr = schedule_weights(sched, stats.epoch)
            assert (stats.lambda1, stats.lambda2, stats.lr) == (lam1, lam2, lr)

    def test_frozen_base_weights_never_change(self):
        samples = small_dataset(32, seed=7)
        model = FusionModel(ModelConfig(seed=2))
        trainable = set(model.trainable_parameters())
        frozen_before = {
            name: p.copy() for name, p in model.params.items() if name not in trainable
        }
        run_training(
            model,
            samples,
            LossSchedule(transition_epoch=1, total_epochs=2, stage1_lr=2e-3, stage2_lr=2e-4),
            seed=0,
        )
        for name, before in frozen_before.items():
            assert np.array_equal(model.params[name], before), name

    def test_trainable_weights_do_change(self):
        samples = small_dataset(32, seed=8)
        model = FusionModel(ModelConfig(seed=3))
        before = {k: v.copy() for k, v in model.trainable_parameters().items()}
        run_training(
            model,
            samples,
            LossSchedule(transition_epoch=1, total_epochs=2, stage1_lr=1e-3, stage2_lr=1e-4),
            seed=0,
        )
        changed = sum(
            not np.array_equal(before[k], v) for k, v in model.trainable_parameters().items()
        )
        assert changed == len(before)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        samples = small_dataset(16, seed=9)
        model = FusionModel(ModelConfig(seed=4))
        bad = LossSchedule(transition_epoch=1, total_epochs=6, stage1_lr=1e12, stage2_lr=1e12)
        with pytest.raises(DivergenceError):
            run_training(model, samples, bad, seed=0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyBatch):
            run_training(FusionModel(ModelConfig()), [], LossSchedule(), seed=0)

    def test_log_row_format(self):
        samples = small_dataset(16, seed=10)
        model = FusionModel(ModelConfig(seed=5))
        history = run_training(
            model,
            samples,
            LossSchedule(transition_epoch=1, total_epochs=2),
            seed=0,
            val_samples=samples[:4],
        )
        header_fields = LOG_HEADER.split(",")
        for stats in history:
            fields = format_log_row(stats).split(",")
            assert len(fields) == len(header_fields)
            assert float(fields[1]) == stats.lambda1
            assert float(fields[3]) == stats.lr
            assert float(fields[7]) == stats.val_miou


class TestEvaluate:
    def test_ground_truth_as_predictions_is_perfect(self):
        samples = small_dataset(20, seed=11)
        report = evaluate_model(None, samples, 0.25, predictions=[s.gt_box for s in samples])
        assert report["miou_samples"] == 1.0
        assert report["miou_categories"] == 1.0
        assert report["recall"] == 1.0
        assert report["counts"]["fp"] == 0

    def test_model_predictions_reported(self):
        samples = small_dataset(20, seed=12)
        model = FusionModel(ModelConfig(seed=6))
        report = evaluate_model(model, samples, 0.25)
        assert 0.0 <= report["miou_samples"] <= 1.0
        assert report["counts"]["tp"] + report["counts"]["fn"] == 20
        assert set(r["category"] for r in report["categories"]) <= {"adult", "car"}

    def test_validation_miou_matches_eval(self):
        samples = small_dataset(10, seed=13)
        model = FusionModel(ModelConfig(seed=7))
        miou = validation_miou(model, samples)
        report = evaluate_model(model, samples, 0.25)
        assert miou == pytest.approx(report["miou_samples"])

    def test_mismatched_predictions_rejected(self):
        samples = small_dataset(3, seed=14)
        with pytest.raises(ConfigError):
            evaluate_model(None, samples, 0.25, predictions=[samples[0].gt_box])

    def test_held_out_categories_evaluate(self):
        # open-set style check: categories absent from training still get
        # features (embeddings are category-hashed) and their own table rows
        records, features = synth_scenes(
            12, {"wheelchair": 0.5, "stroller": 0.5}, seed=15
        )
        samples = build_training_samples(records, {f.sample_id: f for f in features})
        model = FusionModel(ModelConfig(seed=8))
        report = evaluate_model(model, samples, 0.25)
        assert set(r["category"] for r in report["categories"]) <= {"wheelchair", "stroller"}
        assert 0.0 <= report["miou_categories"] <= 1.0
