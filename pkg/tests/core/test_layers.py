"""
Test unary blocks, the LRF update, pooling, upsampling and residual blocks
"""

import numpy as np
import pytest

from RIConv.core.autodiff import ParameterStore, Tape, Tensor, backward, sum_all
from RIConv.core.conv import generate_kernel_points
from RIConv.core.geometry import NeighborIndex, radius_neighbors, sample_uniform_rotation
from RIConv.core.layers import (
    BlockInputs,
    ClassificationHead,
    LRFUpdate,
    ResidualBlock,
    ResidualBlockSpec,
    UnaryBlock,
    classification_head,
    global_average_pool,
    lrf_update,
    max_pool_radius,
    nearest_upsample,
    residual_block,
)
from RIConv.core.lrf import multi_scale_lrf_init


@pytest.fixture
def rng():
    return np.random.default_rng(21)


@pytest.fixture
def store():
    return ParameterStore(np.random.default_rng(0))


@pytest.fixture
def disposition():
    return generate_kernel_points(5, radius=0.5, seed=0, use_cache=False, iterations=200)


def fixed_update(store, update_matrix, width=3, num_alignments=1):
    params = LRFUpdate(store, "upd", width, num_alignments)
    params.output.weight.data = np.zeros_like(params.output.weight.data)
    params.output.bias.data = np.tile(np.asarray(update_matrix).reshape(1, 9), (1, num_alignments))
    return params


def block_inputs(points, features, num_alignments=2, radius=0.5, queries=None):
    frames = multi_scale_lrf_init(points, [8, 16][:num_alignments]).flat()
    query_index = np.arange(len(points)) if queries is None else np.asarray(queries)
    return BlockInputs(
        support_points=points,
        support_features=Tensor(features),
        support_frames=Tensor(frames),
        query_points=points[query_index],
        query_frames=Tensor(frames[query_index]),
        neighbors=radius_neighbors(points, points[query_index], radius),
    )


class TestUnaryBlock:
    def test_shapes_and_activation(self, store, rng):
        block = UnaryBlock(store, "u", 3, 5)
        out = block(Tensor(rng.normal(size=(10, 3))), "train")
        assert out.shape == (10, 5)
        assert np.all(out.data >= 0)
        assert set(store.params) == {"u.mlp.w", "u.bn.gamma", "u.bn.beta"}
        assert "u.bn.running" in store.buffers

    def test_raw_input_map_learns_from_constant_features(self, store):
        block = UnaryBlock(store, "raw", 1, 4, activation=False, norm=False)
        assert block.norm is None
        assert set(store.params) == {"raw.mlp.w", "raw.mlp.b"}
        with Tape() as tape:
            loss = sum_all(block(Tensor(np.ones((10, 1))), "train"))
        grads = backward(tape, loss, [store.params["raw.mlp.w"]])
        np.testing.assert_allclose(grads["raw.mlp.w"], np.full((1, 4), 10.0))


class TestLRFUpdate:
    def test_identity_update_keeps_frames(self, store, rng):
        params = fixed_update(store, np.eye(3), num_alignments=2)
        previous = np.stack([sample_uniform_rotation(rng) for _ in range(8)]).reshape(4, 18)
        result = lrf_update(Tensor(rng.normal(size=(4, 3))), Tensor(previous), params)
        np.testing.assert_allclose(result.frames.data, previous, atol=1e-15)
        assert result.ortho_loss.item() == pytest.approx(0.0, abs=1e-24)

    def test_doubling_update_penalty(self, store, rng):
        params = fixed_update(store, 2 * np.eye(3))
        result = lrf_update(Tensor(rng.normal(size=(1, 3))), Tensor(np.eye(3).reshape(1, 9)),
                            params, omega=0.5)
        assert result.ortho_loss.item() == pytest.approx(13.5)
        np.testing.assert_allclose(result.frames.data, 2 * np.eye(3).reshape(1, 9))
        np.testing.assert_allclose(result.updates[0, 0], 2 * np.eye(3))

    def test_initial_updates_near_identity(self, store, rng):
        params = LRFUpdate(store, "upd", 4, 3)
        result = lrf_update(Tensor(rng.normal(size=(6, 4))),
                            Tensor(np.tile(np.eye(3).reshape(1, 9), (6, 3))), params)
        assert np.max(np.abs(result.updates - np.eye(3))) < 0.2

    def test_equivariance(self, store, rng):
        params = LRFUpdate(store, "upd", 3, 2)
        features = Tensor(rng.normal(size=(5, 3)))
        frames = np.stack([sample_uniform_rotation(rng) for _ in range(10)]).reshape(5, 2, 3, 3)
        rotation = sample_uniform_rotation(rng)
        base = lrf_update(features, Tensor(frames.reshape(5, 18)), params)
        turned = lrf_update(features, Tensor(np.matmul(rotation, frames).reshape(5, 18)), params)
        expected = np.matmul(rotation, base.frames.data.reshape(5, 2, 3, 3))
        np.testing.assert_allclose(turned.frames.data.reshape(5, 2, 3, 3), expected, atol=1e-12)
        assert turned.ortho_loss.item() == pytest.approx(base.ortho_loss.item())

    def test_shape_mismatch(self, store):
        params = LRFUpdate(store, "upd", 3, 2)
        with pytest.raises(ValueError, match="alignments"):
            lrf_update(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 9))), params)


class TestPooling:
    def test_max_pool_single_neighbor(self):
        features = Tensor([[1.0, 5.0], [3.0, 2.0]])
        index = NeighborIndex.from_pairs(np.array([0]), np.array([1]), 1)
        np.testing.assert_array_equal(max_pool_radius(features, index).data, [[3.0, 2.0]])

    def test_max_pool_columnwise(self):
        features = Tensor([[1.0, 5.0], [3.0, 2.0]])
        index = NeighborIndex.from_pairs(np.array([0, 0]), np.array([0, 1]), 2)
        np.testing.assert_array_equal(
            max_pool_radius(features, index).data, [[3.0, 5.0], [0.0, 0.0]]
        )

    def test_upsample_identity(self, rng):
        points = rng.normal(size=(6, 3))
        coarse = Tensor(rng.normal(size=(6, 2)))
        out = nearest_upsample(coarse, points, points)
        np.testing.assert_array_equal(out.data, coarse.data)

    def test_upsample_single_coarse_point(self, rng):
        coarse = Tensor([[1.0, 2.0]])
        out = nearest_upsample(coarse, rng.normal(size=(4, 3)), np.zeros((1, 3)))
        np.testing.assert_array_equal(out.data, np.tile([[1.0, 2.0]], (4, 1)))

    def test_upsample_needs_geometry(self):
        with pytest.raises(ValueError, match="precomputed"):
            nearest_upsample(Tensor([[1.0]]))

    def test_average_pool_constant(self):
        out = global_average_pool(Tensor(np.full((5, 3), 2.5)))
        np.testing.assert_allclose(out.data, [[2.5, 2.5, 2.5]])

    def test_average_pool_per_cloud(self):
        out = global_average_pool(Tensor([[1.0], [3.0], [10.0]]), np.array([0, 0, 1]), 2)
        np.testing.assert_allclose(out.data, [[2.0], [10.0]])

    def test_average_pool_empty(self):
        with pytest.raises(ValueError, match="empty"):
            global_average_pool(Tensor(np.zeros((0, 3))))

    def test_classification_head(self, store, rng):
        head = ClassificationHead(store, "head", 4, 3)
        assert classification_head(Tensor(rng.normal(size=(2, 4))), head).shape == (2, 3)


class TestResidualBlock:
    @pytest.fixture
    def points(self, rng):
        return rng.uniform(-0.5, 0.5, size=(60, 3)) * np.array([1.0, 0.8, 0.6])

    def test_zero_weights_give_zero_features(self, store, disposition, rng, points):
        spec = ResidualBlockSpec("block", 4, 8, num_alignments=2, kernel_size=5)
        block = ResidualBlock(store, spec, disposition)
        block.conv.weights.data[:] = 0.0
        block.shortcut.linear.weight.data[:] = 0.0
        block.lrf_update.output.weight.data[:] = 0.0
        inputs = block_inputs(points, rng.normal(size=(60, 4)))
        out = block(inputs, "train")
        np.testing.assert_allclose(out.features.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(out.frames.data, inputs.query_frames.data, atol=1e-15)

    def test_identity_shortcut_passes_features(self, store, disposition, rng, points):
        spec = ResidualBlockSpec("block", 8, 8, num_alignments=2, kernel_size=5)
        block = ResidualBlock(store, spec, disposition)
        assert block.shortcut is None
        block.conv.weights.data[:] = 0.0
        features = np.abs(rng.normal(size=(60, 8)))
        out = block(block_inputs(points, features), "eval")
        np.testing.assert_allclose(out.features.data, features, atol=1e-12)

    def test_rotation_invariant_features_equivariant_frames(self, store, disposition, rng, points):
        spec = ResidualBlockSpec("block", 4, 8, num_alignments=2, kernel_size=5)
        block = ResidualBlock(store, spec, disposition)
        features = rng.normal(size=(60, 4))
        rotation = sample_uniform_rotation(rng)
        base = block(block_inputs(points, features), "eval")
        turned = block(block_inputs(points @ rotation.T, features), "eval")
        scale = 1.0 + np.max(np.abs(base.features.data))
        assert np.max(np.abs(turned.features.data - base.features.data)) <= 1e-9 * scale
        expected = np.matmul(rotation, base.frames.data.reshape(60, 2, 3, 3))
        np.testing.assert_allclose(turned.frames.data.reshape(60, 2, 3, 3), expected, atol=1e-9)

    def test_strided_block_pools_to_queries(self, store, disposition, rng, points):
        spec = ResidualBlockSpec("block", 4, 8, strided=True, num_alignments=2, kernel_size=5)
        block = ResidualBlock(store, spec, disposition)
        inputs = block_inputs(points, rng.normal(size=(60, 4)), queries=np.arange(0, 60, 3))
        features, frames, ortho = residual_block(inputs, block, "train")
        assert features.shape == (20, 8)
        assert frames.shape == (20, 18)
        assert ortho.item() >= 0.0

    def test_frozen_frames_without_update(self, store, disposition, rng, points):
        spec = ResidualBlockSpec("block", 4, 4, num_alignments=1, kernel_size=5,
                                 update_lrf=False, merge_lrf=False)
        block = ResidualBlock(store, spec, disposition)
        assert block.lrf_update is None and block.conv.lrf_mlp is None
        inputs = block_inputs(points, rng.normal(size=(60, 4)), num_alignments=1)
        out = block(inputs, "eval")
        np.testing.assert_array_equal(out.frames.data, inputs.query_frames.data)
        assert out.ortho_loss.item() == 0.0

    def test_bottleneck_width(self):
        assert ResidualBlockSpec("b", 16, 64).bottleneck == 16
        assert ResidualBlockSpec("b", 1, 2).bottleneck == 1
