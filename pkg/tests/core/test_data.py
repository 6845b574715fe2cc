"""
Test point-cloud file I/O, preprocessing, augmentation and synthetic datasets
"""

import numpy as np
import pytest

from RIConv.core.data import (
    PARTS_PER_CLASS,
    SHAPE_CLASSES,
    AugmentationSpec,
    CloudFormatError,
    augment,
    input_features,
    load_cloud,
    load_manifest,
    normalize_rotation_mode,
    preprocess,
    preprocess_dataset,
    save_cloud,
    save_dataset,
    synth_shape,
    synth_shapes,
)
from RIConv.core.geometry import PointCloud

PLY_TEXT = """ply
format ascii 1.0
comment three vertices
element vertex 3
property float x
property float y
property float z
property int label
end_header
0 0 0 1
1 0.5 0 2
0.25 1 1 1
"""


@pytest.fixture
def rng():
    return np.random.default_rng(13)


@pytest.fixture
def small_dataset():
    return synth_shapes(2, points_per_shape=64, seed=5)


class TestRotationModes:
    @pytest.mark.parametrize("name,mode", [("N", "none"), ("z", "z"), ("A", "so3"),
                                           (" so3 ", "so3"), ("none", "none")])
    def test_aliases(self, name, mode):
        assert normalize_rotation_mode(name) == mode

    def test_unknown(self):
        with pytest.raises(ValueError, match="Unknown rotation mode"):
            normalize_rotation_mode("xy")


class TestCloudFiles:
    def test_xyz_two_points(self, tmp_path):
        path = tmp_path / "two.xyz"
        path.write_text("0 0 0\n1 0 0")
        cloud = load_cloud(path)
        assert len(cloud) == 2
        assert cloud.labels is None
        assert cloud.metadata["source"] == str(path)

    def test_xyz_parse_error_names_line(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("a b c\n")
        with pytest.raises(CloudFormatError, match="Line 1"):
            load_cloud(path)

    def test_xyz_comments_and_labels(self, tmp_path):
        path = tmp_path / "labeled.xyz"
        path.write_text("# header\n0 0 0 3\n\n1 2 3 4  # trailing\n")
        cloud = load_cloud(path)
        np.testing.assert_array_equal(cloud.labels, [3, 4])
        np.testing.assert_array_equal(cloud.points[1], [1.0, 2.0, 3.0])

    def test_xyz_wrong_field_count(self, tmp_path):
        path = tmp_path / "short.xyz"
        path.write_text("0 0 0\n1 2\n")
        with pytest.raises(CloudFormatError, match="Line 2"):
            load_cloud(path)

    def test_ply_round_trip(self, tmp_path):
        source = tmp_path / "tri.ply"
        source.write_text(PLY_TEXT)
        cloud = load_cloud(source)
        assert len(cloud) == 3
        np.testing.assert_array_equal(cloud.labels, [1, 2, 1])
        copy = load_cloud(save_cloud(cloud, tmp_path / "copy.ply"))
        np.testing.assert_array_equal(copy.points, cloud.points)
        np.testing.assert_array_equal(copy.labels, cloud.labels)

    def test_xyz_round_trip_is_exact(self, tmp_path, rng):
        cloud = PointCloud(rng.normal(size=(20, 3)), labels=rng.integers(0, 5, 20))
        copy = load_cloud(save_cloud(cloud, tmp_path / "cloud.xyz"))
        np.testing.assert_array_equal(copy.points, cloud.points)
        np.testing.assert_array_equal(copy.labels, cloud.labels)

    def test_unsupported_ply_element(self, tmp_path):
        path = tmp_path / "mesh.ply"
        path.write_text(PLY_TEXT.replace("end_header", "element face 1\nend_header"))
        with pytest.raises(CloudFormatError, match="'face'"):
            load_cloud(path)

    def test_binary_ply_rejected(self, tmp_path):
        path = tmp_path / "bin.ply"
        path.write_text(PLY_TEXT.replace("ascii", "binary_little_endian"))
        with pytest.raises(CloudFormatError, match="ASCII"):
            load_cloud(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cloud(tmp_path / "absent.xyz")


class TestPreprocess:
    def test_wide_spacing_only_recenters_and_rescales(self, rng):
        points = rng.uniform(-0.5, 0.5, size=(30, 3)) * np.array([1.0, 0.7, 0.4]) + 3.0
        out = preprocess(PointCloud(points), grid=1e-4)
        centered = points - points.mean(axis=0)
        expected = centered / np.max(np.linalg.norm(centered, axis=1))
        assert len(out) == 30
        np.testing.assert_allclose(
            out.points[np.lexsort(out.points.T)], expected[np.lexsort(expected.T)], atol=1e-12
        )
        np.testing.assert_array_equal(out.features, np.ones((30, 1)))
        assert out.metadata["grid_size"] == 1e-4

    def test_output_touches_unit_sphere(self, rng):
        cloud = synth_shape(0, 500, rng)
        out = preprocess(cloud, grid=0.2)
        assert len(out) < 500
        assert np.max(np.linalg.norm(out.points, axis=1)) == pytest.approx(1.0)
        assert out.labels is not None and len(out.labels) == len(out)

    def test_height_features(self, rng):
        points = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(input_features(points, "height")[:, 1], points[:, 2])
        with pytest.raises(ValueError, match="input feature"):
            input_features(points, "normals")

    def test_coincident_points_rejected(self):
        with pytest.raises(ValueError, match="coincide"):
            preprocess(PointCloud(np.ones((4, 3))))


class TestAugmentation:
    def test_identity(self, rng):
        cloud = PointCloud(rng.normal(size=(10, 3)))
        out = augment(cloud, AugmentationSpec(), rng)
        np.testing.assert_array_equal(out.points, cloud.points)

    def test_rotation_preserves_norms(self, rng):
        cloud = PointCloud(rng.normal(size=(10, 3)))
        out = augment(cloud, AugmentationSpec(rotation="A"), rng)
        np.testing.assert_allclose(
            np.linalg.norm(out.points, axis=1), np.linalg.norm(cloud.points, axis=1)
        )
        assert not np.allclose(out.points, cloud.points)

    def test_fixed_scale(self, rng):
        cloud = PointCloud(rng.normal(size=(10, 3)))
        out = augment(cloud, AugmentationSpec(scale_range=(2.0, 2.0)), rng)
        np.testing.assert_allclose(out.points, 2.0 * cloud.points)

    def test_invalid_specs(self):
        with pytest.raises(ValueError, match="Jitter"):
            AugmentationSpec(jitter=-1.0)
        with pytest.raises(ValueError, match="scale range"):
            AugmentationSpec(scale_range=(2.0, 1.0))


class TestSyntheticShapes:
    @pytest.mark.parametrize("class_id", range(len(SHAPE_CLASSES)))
    def test_every_class_has_both_parts(self, class_id):
        cloud = synth_shape(class_id, 400, np.random.default_rng(class_id))
        assert len(cloud) == 400
        assert set(cloud.labels.tolist()) == {
            PARTS_PER_CLASS * class_id, PARTS_PER_CLASS * class_id + 1
        }
        assert cloud.metadata["shape"] == SHAPE_CLASSES[class_id]
        assert 0.8 <= cloud.metadata["scale"] <= 1.2

    def test_balanced_dataset(self, small_dataset):
        assert len(small_dataset) == 16
        assert small_dataset.class_counts() == {c: 2 for c in range(8)}
        assert small_dataset.num_parts == 16

    def test_seed_determinism(self, small_dataset):
        again = synth_shapes(2, points_per_shape=64, seed=5, parallelism=4)
        for a, b in zip(small_dataset, again):
            np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
            assert a.label == b.label

    def test_different_seeds_differ(self, small_dataset):
        other = synth_shapes(2, points_per_shape=64, seed=6)
        assert not np.array_equal(small_dataset.samples[0].cloud.points,
                                  other.samples[0].cloud.points)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError, match="n_per_class"):
            synth_shapes(0)
        with pytest.raises(ValueError, match="points_per_shape"):
            synth_shapes(1, points_per_shape=2)

    def test_preprocess_dataset_records_settings(self, small_dataset):
        processed = preprocess_dataset(small_dataset, grid=0.1, parallelism=2)
        assert processed.preprocessing["grid_size"] == 0.1
        assert processed.preprocessing["seed"] == 5
        np.testing.assert_array_equal(processed.labels, small_dataset.labels)


class TestManifests:
    def test_save_and_load(self, tmp_path, small_dataset):
        manifest = save_dataset(small_dataset, tmp_path / "data")
        assert manifest.name == "train_manifest.txt"
        loaded = load_manifest(manifest, num_classes=8, parallelism=2)
        assert loaded.split == "train"
        np.testing.assert_array_equal(loaded.labels, small_dataset.labels)
        np.testing.assert_array_equal(
            loaded.samples[3].cloud.points, small_dataset.samples[3].cloud.points
        )
        np.testing.assert_array_equal(
            loaded.samples[3].cloud.labels, small_dataset.samples[3].cloud.labels
        )

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="Manifest"):
            load_manifest(tmp_path / "none.txt")
