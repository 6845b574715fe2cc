"""
Test architecture specs, pyramids, the forward pass, the loss and checkpoints
"""

import numpy as np
import pytest

from RIConv.core.autodiff import Tensor, softmax_cross_entropy
from RIConv.core.geometry import PointCloud, sample_uniform_rotation
from RIConv.core.layers import ResidualBlockSpec
from RIConv.core.network import (
    ArchitectureError,
    ArchitectureSpec,
    CheckpointError,
    build,
    build_pyramid,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)


@pytest.fixture
def cache_dir(tmp_path):
    return str(tmp_path / "kernels")


@pytest.fixture
def clouds():
    rng = np.random.default_rng(8)
    return [
        PointCloud(rng.normal(size=(120, 3)) * np.array([0.4, 0.3, 0.2]))
        for _ in range(2)
    ]


@pytest.fixture
def toy_model(cache_dir):
    return build(ArchitectureSpec.toy(), seed=1, cache_dir=cache_dir)


def relative_deviation(value, reference):
    return np.max(np.abs(value - reference)) / (1.0 + np.max(np.abs(reference)))


class TestArchitectureSpec:
    def test_default_skeleton(self):
        spec = ArchitectureSpec()
        assert [b.name for b in spec.blocks] == [f"block{i}" for i in range(10)]
        assert [b.level for b in spec.blocks] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
        assert [b.strided for b in spec.blocks[:4]] == [False, False, True, False]
        assert spec.blocks[-1].out_channels == 256
        assert spec.num_levels == 5
        assert [b.normalize_input for b in spec.blocks[:2]] == [False, True]
        assert not ArchitectureSpec.toy().blocks[0].normalize_input

    def test_level_geometry(self):
        spec = ArchitectureSpec(grid_size=0.05, radius_ratio=2.0)
        assert spec.level_grid(2) == pytest.approx(0.2)
        assert spec.level_radius(1) == pytest.approx(0.2)
        assert spec.block_radius(spec.blocks[2]) == pytest.approx(0.1)
        assert spec.block_radius(spec.blocks[3]) == pytest.approx(0.2)

    def test_variants(self):
        one_local = ArchitectureSpec(variant="one_local")
        assert one_local.num_alignments == 1 and one_local.lrf_scales == [20]
        standard = ArchitectureSpec(variant="standard")
        assert not standard.merge_lrf and not standard.update_lrf
        assert all(not b.update_lrf for b in standard.blocks)
        assert not ArchitectureSpec(variant="no_merge").merge_lrf

    def test_rejects_inconsistent_widths(self):
        blocks = [
            ResidualBlockSpec("block0", 1, 8, num_alignments=4),
            ResidualBlockSpec("block1", 16, 16, num_alignments=4),
        ]
        with pytest.raises(ArchitectureError, match="block1: expects 16"):
            ArchitectureSpec(blocks=blocks)

    def test_rejects_level_jump(self):
        blocks = [ResidualBlockSpec("block0", 1, 8, level=1, num_alignments=4)]
        with pytest.raises(ArchitectureError, match="level"):
            ArchitectureSpec(blocks=blocks)

    def test_rejects_scale_mismatch(self):
        with pytest.raises(ArchitectureError, match="lrf_scales"):
            ArchitectureSpec(num_alignments=3)

    def test_rejects_unknown_names(self):
        with pytest.raises(ArchitectureError, match="variant"):
            ArchitectureSpec(variant="fancy")
        with pytest.raises(ArchitectureError, match="task"):
            ArchitectureSpec(task="detect")

    def test_text_round_trip(self):
        spec = ArchitectureSpec.toy(task="segment", num_classes=16)
        restored = ArchitectureSpec.from_text(spec.to_text())
        assert restored == spec
        assert restored.to_text() == spec.to_text()

    def test_invalid_text(self):
        with pytest.raises(ArchitectureError, match="Invalid architecture text"):
            ArchitectureSpec.from_text("{not json")


class TestBuild:
    def test_seeded_parameters_are_identical(self, cache_dir):
        a = build(ArchitectureSpec.toy(), seed=3, cache_dir=cache_dir)
        b = build(ArchitectureSpec.toy(), seed=3, cache_dir=cache_dir)
        for name, param in a.store.params.items():
            np.testing.assert_array_equal(param.data, b.store.params[name].data)

    def test_toy_parameter_count(self, toy_model):
        assert toy_model.parameter_count() == 2254

    def test_dispositions_follow_block_radius(self, toy_model):
        spec = toy_model.spec
        for block in toy_model.blocks:
            assert block.disposition.radius == pytest.approx(spec.block_radius(block.spec))
            assert block.disposition.sigma == pytest.approx(0.3 * block.disposition.radius)

    def test_segmentation_decoder(self, cache_dir):
        model = build(ArchitectureSpec.toy(task="segment", num_classes=16), cache_dir=cache_dir)
        assert len(model.decoder) == 1
        assert "decoder1.mlp.w" in model.store.params
        assert model.store.params["head.out.w"].shape == (8, 16)


class TestPyramid:
    def test_levels_and_frames(self, clouds):
        spec = ArchitectureSpec.toy()
        pyramid = build_pyramid(clouds[0], spec)
        assert len(pyramid.points) == 2
        assert len(pyramid.points[1]) < len(pyramid.points[0])
        assert len(pyramid.carry[0]) == len(pyramid.points[1])
        assert len(pyramid.upsample[0]) == len(pyramid.points[0])
        assert pyramid.frames.frames.shape == (120, 2, 3, 3)
        np.testing.assert_array_equal(pyramid.features, np.ones((120, 1)))
        assert pyramid.equivariant

    def test_feature_width_mismatch(self, clouds):
        cloud = PointCloud(clouds[0].points, np.ones((120, 3)))
        with pytest.raises(ArchitectureError, match="width 3"):
            build_pyramid(cloud, ArchitectureSpec.toy())

    def test_standard_variant_keeps_equivariance_flag(self, clouds):
        pyramid = build_pyramid(clouds[0], ArchitectureSpec.toy(variant="standard"))
        assert not pyramid.frames.equivariant
        assert pyramid.equivariant


class TestForward:
    def test_classification_shapes(self, toy_model, clouds):
        out = forward(toy_model, clouds)
        assert out.logits.shape == (2, 8)
        np.testing.assert_array_equal(out.cloud_ids, [0, 1])
        assert out.ortho_loss.item() >= 0.0
        assert out.min_det > 0 and out.negative_dets == 0
        assert out.equivariant

    def test_batching_matches_single_runs(self, toy_model, clouds):
        batched = forward(toy_model, clouds).logits.data
        for i, cloud in enumerate(clouds):
            single = forward(toy_model, cloud).logits.data
            assert relative_deviation(batched[i], single[0]) < 1e-12

    def test_rotation_invariance(self, toy_model, clouds):
        rotation = sample_uniform_rotation(np.random.default_rng(2))
        base = forward(toy_model, clouds[0]).logits.data
        turned = forward(toy_model, PointCloud(clouds[0].points @ rotation.T)).logits.data
        assert relative_deviation(turned, base) < 1e-8

    def test_permutation_invariance(self, toy_model, clouds):
        order = np.random.default_rng(4).permutation(120)
        base = forward(toy_model, clouds[0]).logits.data
        permuted = forward(toy_model, PointCloud(clouds[0].points[order])).logits.data
        assert relative_deviation(permuted, base) < 1e-9

    def test_segmentation_permutes_with_points(self, cache_dir, clouds):
        model = build(ArchitectureSpec.toy(task="segment", num_classes=4), cache_dir=cache_dir)
        order = np.random.default_rng(4).permutation(120)
        base = forward(model, clouds[0]).logits.data
        permuted = forward(model, PointCloud(clouds[0].points[order])).logits.data
        assert base.shape == (120, 4)
        assert relative_deviation(permuted, base[order]) < 1e-9

    def test_train_mode_updates_running_stats(self, toy_model, clouds):
        before = toy_model.store.buffers["block0.conv.bn.running"].running_mean.copy()
        forward(toy_model, clouds, mode="train")
        after = toy_model.store.buffers["block0.conv.bn.running"].running_mean
        assert not np.array_equal(before, after)

    def test_projected_frames_are_rotations(self, cache_dir, clouds):
        model = build(ArchitectureSpec.toy(project_lrfs=True), cache_dir=cache_dir)
        out = forward(model, clouds[0])
        assert out.min_det == pytest.approx(1.0)

    def test_standard_variant_runs_without_updates(self, cache_dir, clouds):
        model = build(ArchitectureSpec.toy(variant="standard"), cache_dir=cache_dir)
        out = forward(model, clouds)
        assert out.ortho_loss.item() == 0.0
        assert out.ortho_error == 0.0

    def test_no_clouds(self, toy_model):
        with pytest.raises(ValueError, match="no clouds"):
            forward(toy_model, [])


class TestLoss:
    def test_zero_omega_is_cross_entropy(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        labels = np.array([0, 2, 3])
        loss = total_loss(logits, labels, Tensor(np.zeros((1, 1))))
        assert loss.item() == pytest.approx(softmax_cross_entropy(logits, labels).item())

    def test_confident_logits_vanish(self):
        logits = Tensor(np.eye(3) * 60.0)
        loss = total_loss(logits, np.arange(3), Tensor(np.zeros((1, 1))))
        assert loss.item() < 1e-20

    def test_adds_ortho_term(self):
        logits = Tensor(np.zeros((2, 2)))
        loss = total_loss(logits, [0, 1], Tensor([[1.5]]))
        assert loss.item() == pytest.approx(np.log(2.0) + 1.5)


class TestCheckpoint:
    def test_round_trip_reproduces_outputs(self, toy_model, clouds, tmp_path, cache_dir):
        forward(toy_model, clouds, mode="train")
        path = save_checkpoint(toy_model, tmp_path / "model.ckpt")
        restored = load_checkpoint(path, cache_dir=cache_dir)
        np.testing.assert_array_equal(
            forward(restored, clouds).logits.data, forward(toy_model, clouds).logits.data
        )
        assert encode_checkpoint(restored) == path.read_bytes()

    def test_rng_state_restored(self, toy_model, cache_dir):
        toy_model.rng.normal(size=5)
        restored = decode_checkpoint(encode_checkpoint(toy_model), cache_dir=cache_dir)
        np.testing.assert_array_equal(restored.rng.normal(size=3), toy_model.rng.normal(size=3))

    def test_bad_magic(self, toy_model):
        raw = encode_checkpoint(toy_model)
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + raw[8:])

    def test_truncated(self, toy_model, cache_dir):
        raw = encode_checkpoint(toy_model)
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(raw[:-10], cache_dir=cache_dir)

    def test_trailing_bytes(self, toy_model, cache_dir):
        raw = encode_checkpoint(toy_model)
        with pytest.raises(CheckpointError, match="Trailing"):
            decode_checkpoint(raw + b"\x00", cache_dir=cache_dir)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.ckpt")
