"""
Point-cloud file I/O, preprocessing, rotation augmentation and the synthetic
labeled shape generator.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .geometry import PointCloud, grid_subsample_equivariant, sample_uniform_rotation

logger = logging.getLogger(__name__)

DEFAULT_GRID = 0.02
INPUT_FEATURES = ("ones", "height")

ROTATION_ALIASES = {
    "n": "none",
    "none": "none",
    "z": "z",
    "a": "so3",
    "so3": "so3",
}

SHAPE_CLASSES = (
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "l_bracket",
    "plane_pair",
    "helix",
)
PARTS_PER_CLASS = 2


class CloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be parsed."""

    pass


def normalize_rotation_mode(mode: str) -> str:
    """Map scenario names (N, z, A) and mode names (none, z, so3) to a mode."""
    key = str(mode).strip().lower()
    if key not in ROTATION_ALIASES:
        raise ValueError(f"Unknown rotation mode '{mode}'. Expected N/none, z or A/so3")
    return ROTATION_ALIASES[key]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _parse_xyz(lines: Sequence[str]) -> PointCloud:
    points, labels = [], []
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) not in (3, 4):
            raise CloudFormatError(
                f"Line {number}: expected 'x y z' or 'x y z label', got {len(fields)} fields"
            )
        try:
            points.append([float(v) for v in fields[:3]])
            if len(fields) == 4:
                labels.append(int(fields[3]))
        except ValueError:
            raise CloudFormatError(f"Line {number}: cannot parse '{text}'") from None
    if not points:
        raise CloudFormatError("File contains no points")
    if labels and len(labels) != len(points):
        raise CloudFormatError("Either every line or no line may carry a label")
    return PointCloud(np.array(points), labels=np.array(labels) if labels else None)


def _parse_ply(lines: Sequence[str]) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("Line 1: missing 'ply' magic")
    properties: List[str] = []
    vertex_count = None
    body_start = None
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields or fields[0] in ("comment", "obj_info"):
            continue
        if fields[0] == "format":
            if len(fields) < 2 or fields[1] != "ascii":
                raise CloudFormatError(f"Line {number}: only ASCII PLY is supported")
        elif fields[0] == "element":
            if len(fields) != 3:
                raise CloudFormatError(f"Line {number}: malformed element declaration")
            if fields[1] != "vertex":
                raise CloudFormatError(f"Unsupported PLY element '{fields[1]}'")
            vertex_count = int(fields[2])
        elif fields[0] == "property":
            if fields[1] == "list":
                raise CloudFormatError(f"Line {number}: list properties are not supported")
            properties.append(fields[-1])
        elif fields[0] == "end_header":
            body_start = number
            break
        else:
            raise CloudFormatError(f"Line {number}: unexpected header entry '{fields[0]}'")
    if body_start is None or vertex_count is None:
        raise CloudFormatError("PLY header lacks a vertex element or end_header")
    missing = [axis for axis in ("x", "y", "z") if axis not in properties]
    if missing:
        raise CloudFormatError(f"PLY vertex element lacks properties {missing}")

    columns = [properties.index(axis) for axis in ("x", "y", "z")]
    label_column = properties.index("label") if "label" in properties else None
    points, labels = [], []
    body = lines[body_start:body_start + vertex_count]
    if len(body) < vertex_count:
        raise CloudFormatError(f"PLY declares {vertex_count} vertices, found {len(body)}")
    for offset, line in enumerate(body):
        number = body_start + offset + 1
        fields = line.split()
        if len(fields) != len(properties):
            raise CloudFormatError(
                f"Line {number}: expected {len(properties)} values, got {len(fields)}"
            )
        try:
            points.append([float(fields[c]) for c in columns])
            if label_column is not None:
                labels.append(int(float(fields[label_column])))
        except ValueError:
            raise CloudFormatError(f"Line {number}: cannot parse '{line.strip()}'") from None
    return PointCloud(np.array(points), labels=np.array(labels) if labels else None)


def load_cloud(path: Union[str, Path]) -> PointCloud:
    """Read an ASCII XYZ or ASCII PLY file (chosen by content, then suffix)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Point cloud not found: {path}")
    lines = path.read_text().splitlines()
    if path.suffix.lower() == ".ply" or (lines and lines[0].strip() == "ply"):
        cloud = _parse_ply(lines)
    else:
        cloud = _parse_xyz(lines)
    cloud.metadata["source"] = str(path)
    return cloud


def save_cloud(cloud: PointCloud, path: Union[str, Path]) -> Path:
    """Write XYZ (``x y z [label]``) or ASCII PLY depending on the suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(cloud.points, columns=["x", "y", "z"])
    if cloud.labels is not None:
        frame["label"] = cloud.labels
    if path.suffix.lower() == ".ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        header += ["property double x", "property double y", "property double z"]
        if cloud.labels is not None:
            header.append("property int label")
        header.append("end_header")
        body = frame.to_csv(sep=" ", header=False, index=False, float_format="%.17g")
        path.write_text("\n".join(header) + "\n" + body)
    else:
        frame.to_csv(path, sep=" ", header=False, index=False, float_format="%.17g")
    return path


# ---------------------------------------------------------------------------
# Preprocessing and augmentation
# ---------------------------------------------------------------------------


def _rescale_unit(points: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.max(np.sum(points * points, axis=1)))
    if norm == 0:
        raise ValueError("Cannot rescale a cloud whose points all coincide")
    return points / norm


def input_features(points: np.ndarray, kind: str = "ones") -> np.ndarray:
    """Constant 1 column, or ``[1, z]`` for ``height`` (not rotation invariant)."""
    ones = np.ones((len(points), 1))
    if kind == "ones":
        return ones
    if kind == "height":
        return np.hstack([ones, points[:, 2:3]])
    raise ValueError(f"Unknown input feature '{kind}'. Expected one of {INPUT_FEATURES}")


def preprocess(cloud: PointCloud, grid: float = DEFAULT_GRID,
               input_feature: str = "ones") -> PointCloud:
    """Center, rescale into the unit sphere, grid-subsample and attach features.

    The max-norm rescale is applied again after subsampling so the output
    touches the unit sphere exactly.
    """
    if grid <= 0:
        raise ValueError(f"Grid size must be positive, got {grid}")
    centered = cloud.points - cloud.points.mean(axis=0)
    scaled = cloud.with_points(_rescale_unit(centered))
    result = grid_subsample_equivariant(scaled, grid)
    points = _rescale_unit(result.cloud.points)
    metadata = dict(result.cloud.metadata)
    metadata["grid_size"] = grid
    return PointCloud(points, input_features(points, input_feature), result.cloud.labels, metadata)


@dataclass
class AugmentationSpec:
    """Rotation mode (none, z or so3), jitter sigma and isotropic scale range."""

    rotation: str = "none"
    jitter: float = 0.0
    scale_range: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.rotation = normalize_rotation_mode(self.rotation)
        if self.jitter < 0:
            raise ValueError(f"Jitter must be nonnegative, got {self.jitter}")
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(f"Invalid scale range {self.scale_range}")


def augment(cloud: PointCloud, spec: AugmentationSpec, rng: np.random.Generator) -> PointCloud:
    """Rotate, then jitter, then scale."""
    rotation = sample_uniform_rotation(rng, spec.rotation)
    points = cloud.points @ rotation.T
    if spec.jitter > 0:
        points = points + rng.normal(0.0, spec.jitter, size=points.shape)
    low, high = spec.scale_range
    if high > low:
        points = points * rng.uniform(low, high)
    elif low != 1.0:
        points = points * low
    return cloud.with_points(points)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def _split(rng: np.random.Generator, n: int, weights: Sequence[float]) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(weights), size=n, p=weights / weights.sum())


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    points = _unit_vectors(rng, n)
    return points, (points[:, 2] < 0).astype(np.int64)


def _cube(rng, n):
    half = 0.6
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    points = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        rows = axis == a
        points[rows, a] = sign[rows] * half
        points[np.ix_(rows, others)] = uv[rows]
    return points, (face != 4).astype(np.int64)


def _cylinder(rng, n):
    radius, height = 0.5, 1.6
    part = _split(rng, n, [2 * np.pi * radius * height, 2 * np.pi * radius ** 2])
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(
        part == 0,
        rng.uniform(-height / 2, height / 2, size=n),
        np.where(rng.uniform(size=n) < 0.5, -height / 2, height / 2),
    )
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z]), part


def _cone(rng, n):
    radius, height = 0.6, 1.4
    slant = np.hypot(radius, height)
    part = _split(rng, n, [np.pi * radius * slant, np.pi * radius ** 2])
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = np.sqrt(rng.uniform(size=n))
    r = radius * t
    z = np.where(part == 0, height * (1 - t), 0.0)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z]), part


def _torus(rng, n):
    major, minor = 0.7, 0.25
    theta = rng.uniform(0, 2 * np.pi, size=n)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(phi)
    points = np.column_stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)])
    return points, (np.cos(phi) < 0).astype(np.int64)


def _l_bracket(rng, n):
    part = _split(rng, n, [1.2 * 0.5, 0.8 * 0.5])
    u, v = rng.uniform(size=n), rng.uniform(size=n)
    horizontal = np.column_stack([1.2 * u, 0.5 * v, np.zeros(n)])
    vertical = np.column_stack([np.zeros(n), 0.5 * v, 0.8 * u])
    return np.where(part[:, None] == 0, horizontal, vertical), part


def _plane_pair(rng, n):
    part = _split(rng, n, [1.6 * 1.0, 1.2 * 0.8])
    u, v = rng.uniform(-0.5, 0.5, size=n), rng.uniform(-0.5, 0.5, size=n)
    lower = np.column_stack([1.6 * u, 1.0 * v, np.full(n, -0.3)])
    upper = np.column_stack([1.2 * u, 0.8 * v, np.full(n, 0.3)])
    return np.where(part[:, None] == 0, lower, upper), part


def _helix(rng, n):
    radius, tube, turns, height = 0.5, 0.08, 2.0, 1.6
    t = rng.uniform(0, 1, size=n)
    angle = 2 * np.pi * turns * t
    center = np.column_stack([radius * np.cos(angle), radius * np.sin(angle), height * (t - 0.5)])
    return center + tube * _unit_vectors(rng, n), (t >= 0.5).astype(np.int64)


_GENERATORS: Dict[str, Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]]] = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "l_bracket": _l_bracket,
    "plane_pair": _plane_pair,
    "helix": _helix,
}


@dataclass
class Sample:
    """One cloud with its class label; ``cloud.labels`` holds global part ids."""

    cloud: PointCloud
    label: int


@dataclass
class Dataset:
    samples: List[Sample]
    split: str = "train"
    num_classes: int = len(SHAPE_CLASSES)
    preprocessing: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def num_parts(self) -> int:
        return self.num_classes * PARTS_PER_CLASS

    def class_counts(self) -> Dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in range(self.num_classes)}


def synth_shape(class_id: int, num_points: int, rng: np.random.Generator,
                jitter_ratio: float = 0.01) -> PointCloud:
    """Sample one instance of a parametric shape class.

    Instances are scaled uniformly in [0.8, 1.2] and jittered with sigma equal
    to ``jitter_ratio`` times the instance extent (max point norm).
    """
    name = SHAPE_CLASSES[class_id]
    points, parts = _GENERATORS[name](rng, num_points)
    scale = rng.uniform(0.8, 1.2)
    points = points * scale
    extent = float(np.sqrt(np.max(np.sum(points * points, axis=1))))
    if jitter_ratio > 0:
        points = points + rng.normal(0.0, jitter_ratio * extent, size=points.shape)
    labels = PARTS_PER_CLASS * class_id + parts
    return PointCloud(points, labels=labels, metadata={"shape": name, "scale": scale})


def synth_shapes(
    n_per_class: int,
    points_per_shape: int = 1024,
    seed: int = 0,
    jitter_ratio: float = 0.01,
    augmentation: Optional[AugmentationSpec] = None,
    split: str = "train",
    parallelism: int = 1,
) -> Dataset:
    """Balanced synthetic dataset of the eight shape classes.

    Every instance draws from its own generator spawned from ``seed``, so
    the dataset is identical for any ``parallelism``.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be at least 1, got {n_per_class}")
    if points_per_shape < 3:
        raise ValueError(f"points_per_shape must be at least 3, got {points_per_shape}")
    augmentation = augmentation or AugmentationSpec()
    jobs = [(c, i) for c in range(len(SHAPE_CLASSES)) for i in range(n_per_class)]
    seeds = np.random.SeedSequence(seed).spawn(len(jobs))

    def make(job_seed) -> Sample:
        (class_id, _), child = job_seed
        rng = np.random.default_rng(child)
        cloud = synth_shape(class_id, points_per_shape, rng, jitter_ratio)
        return Sample(augment(cloud, augmentation, rng), class_id)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        samples = list(pool.map(make, zip(jobs, seeds)))
    logger.info(f"Generated {len(samples)} synthetic {split} shapes (seed {seed})")
    return Dataset(samples, split, len(SHAPE_CLASSES), {"generator": "synthetic", "seed": seed})


def preprocess_dataset(dataset: Dataset, grid: float = DEFAULT_GRID,
                       input_feature: str = "ones", parallelism: int = 1) -> Dataset:
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        clouds = list(
            pool.map(lambda s: preprocess(s.cloud, grid, input_feature), dataset.samples)
        )
    samples = [Sample(c, s.label) for c, s in zip(clouds, dataset.samples)]
    record = dict(dataset.preprocessing)
    record.update({"grid_size": grid, "rescaled": True, "input_feature": input_feature})
    return Dataset(samples, dataset.split, dataset.num_classes, record)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write every cloud as XYZ plus ``<split>_manifest.txt`` (``path label``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for index, sample in enumerate(dataset.samples):
        name = f"{dataset.split}_{index:05d}.xyz"
        save_cloud(sample.cloud, directory / name)
        names.append(name)
    manifest = directory / f"{dataset.split}_manifest.txt"
    pd.DataFrame({"path": names, "label": dataset.labels}).to_csv(
        manifest, sep=" ", header=False, index=False
    )
    logger.info(f"Wrote {len(names)} clouds and {manifest}")
    return manifest


def load_manifest(path: Union[str, Path], split: Optional[str] = None,
                  num_classes: Optional[int] = None, parallelism: int = 1) -> Dataset:
    """Load a dataset from a ``path label`` manifest; paths resolve next to it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    table = pd.read_csv(
        path, sep=r"\s+", header=None, names=["path", "label"], comment="#",
        dtype={"path": str, "label": np.int64},
    )
    if table.empty:
        raise CloudFormatError(f"Manifest {path} lists no clouds")
    files = [p if Path(p).is_absolute() else path.parent / p for p in table["path"]]
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        clouds = list(pool.map(load_cloud, files))
    labels = table["label"].tolist()
    if split is None:
        split = path.stem.replace("_manifest", "")
    num_classes = num_classes or int(max(labels)) + 1
    samples = [Sample(cloud, int(label)) for cloud, label in zip(clouds, labels)]
    return Dataset(samples, split, num_classes, {"manifest": str(path)})
