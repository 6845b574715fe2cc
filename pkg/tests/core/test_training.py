"""
Test training, evaluation, scenario rotations and the ablation drivers on tiny runs
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from RIConv.core.autodiff import NonFiniteError, Tensor
from RIConv.core.config.run_config import RunConfig
from RIConv.core.data import Dataset, Sample
from RIConv.core.geometry import PointCloud
from RIConv.core.network import ArchitectureError, build, load_checkpoint, save_checkpoint
from RIConv.core.training import (
    Trainer,
    evaluate,
    evaluate_checkpoint,
    load_datasets,
    output_classes,
    rotate_dataset,
    run_ablation,
    run_omega_sweep,
    segmentation_ious,
    train_model,
)
from RIConv.core.verify import AuditReport

TINY = dict(
    n_per_class=1,
    n_test_per_class=1,
    points_per_shape=96,
    grid_size=0.15,
    kernel_size=5,
    num_alignments=2,
    lrf_scales=[8, 16],
    channels=[8, 16],
    epochs=1,
    batch=4,
    seed=3,
)


@pytest.fixture
def config(tmp_path):
    return RunConfig.from_parameters(
        output_dir=str(tmp_path / "run"), cache_dir=str(tmp_path / "kernels"), **TINY
    )


@pytest.fixture(scope="module")
def datasets():
    return load_datasets(RunConfig.from_parameters(**TINY))


def model_for(config, num_classes=8):
    return build(config.architecture(num_classes), config.seed, cache_dir=config.cache_dir)


class TestSegmentationIoU:
    def test_perfect_prediction(self):
        labels = np.array([2, 2, 3, 3])
        assert segmentation_ious(labels, labels, 1) == 1.0

    def test_partial_overlap(self):
        prediction = np.array([2, 2, 3, 3])
        truth = np.array([2, 3, 3, 3])
        assert segmentation_ious(prediction, truth, 1) == pytest.approx((0.5 + 2 / 3) / 2)

    def test_absent_part_counts_as_one(self):
        labels = np.array([2, 2])
        assert segmentation_ious(labels, labels, 1) == 1.0
        assert segmentation_ious(np.array([3, 3]), labels, 1) == 0.0


class TestDatasets:
    def test_synthetic_splits(self, datasets):
        train, test = datasets
        assert len(train) == 8 and len(test) == 8
        assert train.split == "train" and test.split == "test"
        assert train.preprocessing["grid_size"] == 0.15
        assert all(s.cloud.features.shape[1] == 1 for s in train)

    def test_output_classes(self, datasets):
        train, _ = datasets
        classify = RunConfig.from_parameters(**TINY)
        segment = RunConfig.from_parameters(task="segment", **TINY)
        assert output_classes(classify, train) == 8
        assert output_classes(segment, train) == 16

    def test_rotate_dataset(self, datasets):
        _, test = datasets
        assert rotate_dataset(test, "none", 0) is test
        rotated = rotate_dataset(test, "so3", 0)
        for before, after in zip(test.samples, rotated.samples):
            assert after.label == before.label
            np.testing.assert_allclose(
                np.linalg.norm(after.cloud.points, axis=1),
                np.linalg.norm(before.cloud.points, axis=1),
                atol=1e-12,
            )
            assert not np.allclose(after.cloud.points, before.cloud.points)

    def test_rotate_dataset_is_seeded(self, datasets):
        _, test = datasets
        first = rotate_dataset(test, "z", 4)
        second = rotate_dataset(test, "z", 4)
        np.testing.assert_array_equal(first.samples[0].cloud.points,
                                      second.samples[0].cloud.points)


class TestEvaluate:
    def test_classification(self, config, datasets):
        _, test = datasets
        result = evaluate(model_for(config), test, batch=3)
        assert result.metric == "accuracy"
        assert 0.0 <= result.value <= 1.0
        assert list(result.per_class.columns) == ["class", "count", "accuracy"]
        assert result.per_class["count"].sum() == len(test)
        assert len(result.predictions[0]) == len(test)

    def test_segmentation(self, config, datasets):
        _, test = datasets
        segment = RunConfig.from_parameters(task="segment", cache_dir=config.cache_dir, **TINY)
        result = evaluate(model_for(segment, num_classes=16), test)
        assert result.metric == "mIoU"
        assert 0.0 <= result.value <= 1.0
        for prediction, sample in zip(result.predictions, test.samples):
            assert len(prediction) == len(sample.cloud)
            assert set(prediction) <= {2 * sample.label, 2 * sample.label + 1}

    def test_empty_dataset(self, config):
        with pytest.raises(ValueError, match="empty dataset"):
            evaluate(model_for(config), Dataset([]))

    def test_class_count_mismatch(self, config, datasets):
        _, test = datasets
        with pytest.raises(ArchitectureError, match="Model predicts"):
            evaluate(model_for(config, num_classes=16), test)


class TestTrainer:
    def test_fit_writes_metrics_and_checkpoints(self, tmp_path, datasets):
        config = RunConfig.from_parameters(
            output_dir=str(tmp_path / "run"), cache_dir=str(tmp_path / "kernels"),
            **{**TINY, "epochs": 2},
        )
        model, history = train_model(config, datasets)
        run = tmp_path / "run"
        assert list(history.columns) == [
            "epoch", "train_loss", "ortho_loss", "ortho_error", "test_accuracy", "lr",
        ]
        assert list(history["epoch"]) == [1, 2]
        assert history["lr"].iloc[1] == pytest.approx(config.lr * config.lr_decay)
        assert np.all(np.isfinite(history["train_loss"]))
        assert (run / "last.ckpt").exists() and (run / "best.ckpt").exists()
        assert (run / "config.txt").read_text() == config.to_text()
        written = pd.read_csv(run / "metrics.csv")
        assert len(written) == 2

        restored = load_checkpoint(run / "last.ckpt", cache_dir=config.cache_dir)
        for name, param in model.store.params.items():
            np.testing.assert_array_equal(restored.store.params[name].data, param.data)

    def test_train_step_updates_parameters(self, config, datasets):
        train, test = datasets
        augmented = RunConfig.from_parameters(
            train_rotation="so3", jitter=0.001, scale_min=0.9, scale_max=1.1,
            cache_dir=config.cache_dir, **TINY,
        )
        model = model_for(augmented)
        before = {name: p.data.copy() for name, p in model.store.params.items()}
        trainer = Trainer(augmented, model, train, test, output_dir=config.output_dir)
        loss, ortho = trainer.train_step([0, 1])
        assert np.isfinite(loss) and ortho >= 0.0
        assert any(
            not np.array_equal(before[name], p.data) for name, p in model.store.params.items()
        )
        assert all(not p.grad.any() for p in model.store.params.values())

    def test_static_pyramids_are_cached(self, config, datasets):
        train, test = datasets
        trainer = Trainer(config, model_for(config), train, test)
        assert trainer._pyramid(0) is trainer._pyramid(0)

    def test_non_finite_loss_aborts(self, mocker, config, datasets):
        mocker.patch("RIConv.core.training.total_loss", return_value=Tensor([[np.nan]]))
        train, test = datasets
        trainer = Trainer(config, model_for(config), train, test)
        with pytest.raises(NonFiniteError, match="training loss"):
            trainer.fit()
        assert not trainer.metrics_path.exists()
        assert not (trainer.output_dir / "last.ckpt").exists()

    def test_segmentation_needs_part_labels(self, config):
        segment = RunConfig.from_parameters(task="segment", cache_dir=config.cache_dir, **TINY)
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.normal(size=(40, 3)) * [0.5, 0.3, 0.2], np.ones((40, 1)))
        train = Dataset([Sample(cloud, 0)])
        trainer = Trainer(segment, model_for(segment, num_classes=16), train, train)
        with pytest.raises(ValueError, match="part labels"):
            trainer.train_step([0])


def tiny_config(tmp_path, **overrides):
    return RunConfig.from_parameters(
        output_dir=str(tmp_path / "run"), cache_dir=str(tmp_path / "kernels"),
        **{**TINY, **overrides},
    )


class TestLearning:
    """Short real runs; the ortho-loss sums over points, so steps stay small."""

    def test_each_step_lowers_the_loss(self, tmp_path, datasets):
        config = tiny_config(tmp_path, lr=1e-5, momentum=0.0)
        train, test = datasets
        trainer = Trainer(config, model_for(config), train, test)
        batch = list(range(len(train)))
        losses = [trainer.train_step(batch)[0] for _ in range(11)]
        assert all(after < before for before, after in zip(losses, losses[1:]))

    def test_ortho_penalty_keeps_updates_orthonormal(self, tmp_path, datasets):
        errors = {}
        for omega in (0.0, 0.5):
            config = tiny_config(tmp_path / f"omega_{omega}", omega=omega, lr=1e-5,
                                 momentum=0.0, epochs=3)
            _, history = train_model(config, datasets)
            errors[omega] = history["ortho_error"].iloc[-1]
        assert errors[0.5] < errors[0.0]

    def test_overfits_eight_clouds(self, tmp_path, datasets):
        config = tiny_config(tmp_path, omega=0.0, lr=0.05, momentum=0.9, batch=8)
        train, test = datasets
        model = model_for(config)
        trainer = Trainer(config, model, train, test)
        batch = list(range(len(train)))
        loss = np.inf
        for _ in range(300):
            loss = trainer.train_step(batch)[0]
            if loss < 0.1:
                break
        assert loss < 0.1
        assert evaluate(model, train).value == 1.0

    def test_learns_synthetic_shapes(self, tmp_path):
        config = tiny_config(
            tmp_path, n_per_class=8, n_test_per_class=4, points_per_shape=128,
            omega=0.0, lr=0.02, momentum=0.9, lr_decay=1.0, batch=8,
        )
        train, test = load_datasets(config)
        model = model_for(config)
        trainer = Trainer(config, model, train, test)
        best = 0.0
        for epoch in range(1, 41):
            best = max(best, trainer.run_epoch(epoch)["test_accuracy"])
            if best >= 0.9:
                break
        assert best >= 0.9
        unrotated = evaluate(model, test).value
        rotated = evaluate(model, rotate_dataset(test, "so3", 7)).value
        assert rotated == pytest.approx(unrotated, abs=0.005)


class TestEvaluateCheckpoint:
    def test_rotated_scenario(self, config, datasets):
        _, test = datasets
        model = model_for(config)
        output = Path(config.output_dir)
        checkpoint = save_checkpoint(model, output / "model.ckpt")
        scenario = RunConfig.from_parameters(
            test_rotation="A", output_dir=config.output_dir, cache_dir=config.cache_dir, **TINY
        )
        result = evaluate_checkpoint(scenario, checkpoint, test=test)
        summary = pd.read_csv(output / "eval.csv")
        per_class = pd.read_csv(output / "eval_per_class.csv")
        assert list(summary["scenario"]) == ["none/so3"]
        assert summary["accuracy"].iloc[0] == pytest.approx(result.value)
        assert set(per_class["scenario"]) == {"none/so3"}
        assert len(per_class) == 8


class TestAblation:
    @pytest.fixture
    def fake_training(self, mocker):
        calls = []

        def fake(config, datasets, output_dir):
            calls.append((config, output_dir))
            model = build(config.architecture(8), config.seed, cache_dir=config.cache_dir)
            history = pd.DataFrame({
                "epoch": [1], "train_loss": [1.5], "ortho_loss": [0.1],
                "ortho_error": [0.2], "test_accuracy": [0.5], "lr": [config.lr],
            })
            return model, history

        mocker.patch("RIConv.core.training.train_model", side_effect=fake)
        return calls

    def test_variants(self, mocker, fake_training, config, datasets):
        mocker.patch(
            "RIConv.core.verify.audit_network",
            return_value=AuditReport("network_invariance", 2, 1e-12, 1e-8, True),
        )
        table = run_ablation(config, datasets)
        assert list(table["variant"]) == ["full", "no_merge", "one_local", "one_global"]
        assert [c.variant for c, _ in fake_training] == list(table["variant"])
        widths = dict(zip(table["variant"], table["kernel_width"]))
        assert widths["full"] > widths["no_merge"]
        assert table["invariance_pass"].all()
        assert "test_accuracy_so3" in table.columns
        assert (Path(config.output_dir) / "ablation" / "ablation.csv").exists()

    def test_untrained_variants_pass_the_audit(self, fake_training, config, datasets):
        audited = config.model_copy(update={"network_audit_rotations": 2})
        table = run_ablation(audited, datasets, variants=["full", "one_global"],
                             audit_clouds=2)
        assert list(table["variant"]) == ["full", "one_global"]
        assert table["invariance_pass"].all()

    def test_omega_sweep(self, fake_training, config, datasets):
        swept = config.model_copy(update={"omega_sweep": [0.0, 0.5]})
        table = run_omega_sweep(swept, datasets)
        assert list(table["omega"]) == [0.0, 0.5]
        assert [c.omega for c, _ in fake_training] == [0.0, 0.5]
        assert all(c.variant == "full" for c, _ in fake_training)
        assert fake_training[1][1].name == "omega_0.5"
        assert (Path(config.output_dir) / "omega_sweep" / "omega_sweep.csv").exists()
