"""
Point-cloud containers, rotations, neighborhood search and grid subsampling.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ROTATION_TOLERANCE = 1e-12

# Slightly enlarged hash cells keep points at distance exactly r inside the
# 27-cell stencil despite rounding in the cell computation.
_CELL_MARGIN = 1.0 + 1e-9
_STENCIL = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)

# Carry candidates this close (relative) to the nearest one tie; ties are
# resolved on grid-frame coordinates snapped to CARRY_KEY_QUANTUM * cell.
CARRY_CANDIDATES = 8
CARRY_TIE_TOLERANCE = 1e-9
CARRY_KEY_QUANTUM = 1e-6


@dataclass
class PointCloud:
    """N points with per-point feature rows and optional integer labels."""

    points: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("A point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("Point coordinates must be finite")
        n = len(self.points)
        if self.features is None:
            self.features = np.zeros((n, 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(
                f"features must have {n} rows, got shape {self.features.shape}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(
                    f"labels must have shape ({n},), got {self.labels.shape}"
                )

    def __len__(self) -> int:
        return len(self.points)

    @property
    def equivariant(self) -> bool:
        return bool(self.metadata.get("equivariant", True))

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(
            points,
            self.features.copy(),
            None if self.labels is None else self.labels.copy(),
            dict(self.metadata),
        )


@dataclass
class NeighborIndex:
    """Neighbor lists in compressed form: query q owns ``indices[offsets[q]:offsets[q+1]]``."""

    offsets: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_pairs(cls, query_ids: np.ndarray, support_ids: np.ndarray, num_queries: int):
        """Build from pairs already grouped by query in the desired order."""
        counts = np.bincount(query_ids, minlength=num_queries)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(offsets, np.asarray(support_ids, dtype=np.int64))

    @classmethod
    def concat(cls, parts: Sequence["NeighborIndex"], support_sizes: Sequence[int]):
        """Stack independent indices, shifting support ids by the preceding sizes."""
        shifts = np.concatenate([[0], np.cumsum(support_sizes)[:-1]]).astype(np.int64)
        offsets = [np.zeros(1, dtype=np.int64)]
        indices = []
        base = 0
        for part, shift in zip(parts, shifts):
            offsets.append(part.offsets[1:] + base)
            indices.append(part.indices + shift)
            base += len(part.indices)
        return cls(np.concatenate(offsets), np.concatenate(indices).astype(np.int64))

    @property
    def num_queries(self) -> int:
        return len(self.offsets) - 1

    def __len__(self) -> int:
        return self.num_queries

    def __getitem__(self, query: int) -> np.ndarray:
        return self.indices[self.offsets[query]:self.offsets[query + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edges(self):
        """Return (query ids, support ids), one entry per listed neighbor."""
        query_ids = np.repeat(np.arange(self.num_queries), self.counts())
        return query_ids, self.indices

    def lists(self) -> List[List[int]]:
        return [self[q].tolist() for q in range(self.num_queries)]

    def as_array(self) -> np.ndarray:
        """Dense (queries, k) view; only valid when every list has the same length."""
        counts = self.counts()
        if counts.size and np.any(counts != counts[0]):
            raise ValueError("Neighbor lists have different lengths")
        k = int(counts[0]) if counts.size else 0
        return self.indices.reshape(self.num_queries, k)


def _as_points(source: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(source, PointCloud):
        return source.points
    points = np.asarray(source, dtype=np.float64)
    if points.ndim == 1 and points.shape == (3,):
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"Expected (N, 3) points, got shape {points.shape}")
    return points


def squared_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance over the last axis, with a fixed summation order."""
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def radius_neighbors(
    source: Union[PointCloud, np.ndarray],
    queries: Union[PointCloud, np.ndarray],
    r: float,
    max_neighbors: Optional[int] = None,
) -> NeighborIndex:
    """Exact radius search through a uniform spatial hash grid.

    Args:
        source: Input cloud (or (N, 3) array).
        queries: Query points.
        r: Search radius; ``|x_i - x| <= r`` is kept.
        max_neighbors: Optional cap; the nearest are kept (ties by lower index).

    Returns:
        NeighborIndex whose lists are sorted by ascending input index.
    """
    if r <= 0:
        raise ValueError(f"Search radius must be positive, got {r}")
    points = _as_points(source)
    query_points = _as_points(queries)
    m = len(query_points)
    if m == 0 or len(points) == 0:
        return NeighborIndex(np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

    cell = r * _CELL_MARGIN
    point_cells = np.floor(points / cell).astype(np.int64)
    query_cells = np.floor(query_points / cell).astype(np.int64)
    low = np.minimum(point_cells.min(axis=0), query_cells.min(axis=0)) - 1
    dims = np.maximum(point_cells.max(axis=0), query_cells.max(axis=0)) - low + 2

    def encode(cells: np.ndarray) -> np.ndarray:
        shifted = cells - low
        return (shifted[:, 0] * dims[1] + shifted[:, 1]) * dims[2] + shifted[:, 2]

    order = np.argsort(encode(point_cells), kind="stable")
    sorted_keys = encode(point_cells)[order]

    query_parts, support_parts = [], []
    for offset in _STENCIL:
        keys = encode(query_cells + offset)
        start = np.searchsorted(sorted_keys, keys, side="left")
        stop = np.searchsorted(sorted_keys, keys, side="right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        query_ids = np.repeat(np.arange(m), counts)
        first = np.repeat(np.cumsum(counts) - counts, counts)
        positions = start[query_ids] + np.arange(total) - first
        query_parts.append(query_ids)
        support_parts.append(order[positions])

    if not query_parts:
        return NeighborIndex(np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

    query_ids = np.concatenate(query_parts)
    support_ids = np.concatenate(support_parts)
    dist2 = squared_distance(points[support_ids], query_points[query_ids])
    keep = dist2 <= r * r
    query_ids, support_ids, dist2 = query_ids[keep], support_ids[keep], dist2[keep]

    if max_neighbors is not None:
        order = np.lexsort((support_ids, dist2, query_ids))
        query_ids, support_ids = query_ids[order], support_ids[order]
        counts = np.bincount(query_ids, minlength=m)
        rank = np.arange(len(query_ids)) - np.repeat(np.cumsum(counts) - counts, counts)
        keep = rank < max_neighbors
        query_ids, support_ids = query_ids[keep], support_ids[keep]

    order = np.lexsort((support_ids, query_ids))
    return NeighborIndex.from_pairs(query_ids[order], support_ids[order], m)


def knn(
    source: Union[PointCloud, np.ndarray],
    queries: Union[PointCloud, np.ndarray],
    k: int,
    chunk_size: int = 512,
) -> NeighborIndex:
    """k nearest neighbors in nondecreasing distance order, ties by lower index.

    When ``k`` exceeds the cloud size the farthest found index is repeated.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    points = _as_points(source)
    query_points = _as_points(queries)
    m, n = len(query_points), len(points)
    take = min(k, n)
    result = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, chunk_size):
        stop = min(start + chunk_size, m)
        dist2 = squared_distance(query_points[start:stop, None, :], points[None, :, :])
        nearest = np.argsort(dist2, axis=1, kind="stable")[:, :take]
        result[start:stop, :take] = nearest
        if take < k:
            result[start:stop, take:] = nearest[:, -1:]
    offsets = np.arange(m + 1, dtype=np.int64) * k
    return NeighborIndex(offsets, result.reshape(-1))


@dataclass
class SubsampleResult:
    cloud: PointCloud
    carry: np.ndarray
    frame: np.ndarray
    equivariant: bool
    assignment: np.ndarray


def _carry_indices(
    points: np.ndarray, local: np.ndarray, barycenters: np.ndarray, cell: float
) -> np.ndarray:
    """Per barycenter, the nearest input point.

    Near-ties are common (two members of a cell are always equidistant from
    their midpoint) and go to the candidate with the lexicographically
    smallest grid-frame coordinates. Those coordinates move with the cloud,
    so the choice depends neither on the input order nor on a rotation.
    """
    m = len(barycenters)
    k = min(CARRY_CANDIDATES, len(points))
    index = knn(points, barycenters, k).indices.reshape(m, k)
    dist = np.linalg.norm(points[index] - barycenters[:, None, :], axis=2)
    tied = dist <= dist[:, :1] * (1.0 + CARRY_TIE_TOLERANCE) + CARRY_TIE_TOLERANCE * cell

    key = np.round(local[index] / (CARRY_KEY_QUANTUM * cell)).astype(np.int64)
    key[~tied] = np.iinfo(np.int64).max
    first = np.lexsort((key[..., 2], key[..., 1], key[..., 0]), axis=-1)[:, 0]
    return index[np.arange(m), first]


def grid_subsample_equivariant(
    source: Union[PointCloud, np.ndarray], cell: float
) -> SubsampleResult:
    """Grid subsampling with cells aligned to the cloud's global PCA frame.

    One cell is centered on the centroid, so the whole map commutes with
    rotations and translations whenever the global frame is well defined.
    Each nonempty cell yields its barycenter, averaged features and the
    majority label (ties to the smaller label). ``carry`` holds, per output
    point, the index of its nearest input point, and ``assignment`` the
    output index of every input point.
    """
    from .lrf import global_pca_frame

    if cell <= 0:
        raise ValueError(f"Grid cell size must be positive, got {cell}")
    cloud = source if isinstance(source, PointCloud) else PointCloud(source)
    points = cloud.points
    centroid = points.mean(axis=0)
    frame, degenerate = global_pca_frame(points)
    if degenerate:
        logger.warning(
            "Global PCA is degenerate; subsampling on an axis-aligned grid "
            "without equivariance guarantees"
        )
        frame = np.eye(3)

    local = (points - centroid) @ frame
    cells = np.floor(local / cell + 0.5).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    num_cells = len(counts)

    sums = np.zeros((num_cells, 3))
    np.add.at(sums, inverse, points)
    new_points = sums / counts[:, None]

    new_features = np.zeros((num_cells, cloud.features.shape[1]))
    np.add.at(new_features, inverse, cloud.features)
    new_features /= counts[:, None]

    new_labels = None
    if cloud.labels is not None:
        votes = np.zeros((num_cells, int(cloud.labels.max()) + 1), dtype=np.int64)
        np.add.at(votes, (inverse, cloud.labels), 1)
        new_labels = np.argmax(votes, axis=1)

    equivariant = cloud.equivariant and not degenerate
    metadata = dict(cloud.metadata)
    metadata["equivariant"] = equivariant
    result = PointCloud(new_points, new_features, new_labels, metadata)
    carry = _carry_indices(points, local, new_points, cell)
    logger.debug(f"Subsampled {len(points)} points to {num_cells} with cell {cell}")
    return SubsampleResult(result, carry, frame, equivariant, inverse)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_about_axis(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation by ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * cross + (1 - np.cos(angle)) * cross @ cross


def sample_uniform_rotation(rng: np.random.Generator, mode: str = "so3") -> np.ndarray:
    """Haar-uniform rotation (``so3``) or uniform rotation about e_z (``z``)."""
    if mode == "so3":
        q = rng.normal(size=4)
        return quaternion_to_matrix(q / np.linalg.norm(q))
    if mode == "z":
        return rotation_about_axis((0.0, 0.0, 1.0), rng.uniform(0.0, 2.0 * np.pi))
    if mode == "none":
        return np.eye(3)
    raise ValueError(f"Unknown rotation mode '{mode}' (expected none, z or so3)")


def is_rotation(matrix: np.ndarray, tol: float = ROTATION_TOLERANCE) -> bool:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        return False
    return bool(
        np.max(np.abs(matrix.T @ matrix - np.eye(3))) <= tol
        and abs(np.linalg.det(matrix) - 1.0) <= tol
    )


def apply_rotation(rotation: np.ndarray, cloud: PointCloud) -> PointCloud:
    """Rotate points; features and labels are carried unchanged."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError(f"Rotation must be 3x3, got {rotation.shape}")
    return cloud.with_points(cloud.points @ rotation.T)
