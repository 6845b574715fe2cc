"""
Kernel point convolutions: disposition, influence, the standard operator and
the aligned / multi-aligned operators built on local reference frames.
"""

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from .autodiff import (
    Parameter,
    ParameterStore,
    Tensor,
    add,
    concat_cols,
    frame_matmul,
    frame_vecmul,
    gather_rows,
    kernel_influence,
    matmul,
    relu,
    reshape,
    row_outer,
    segment_sum,
)
from .geometry import NeighborIndex, radius_neighbors
from .utils.cache_utils import CACHE_DIRS, generate_cache_key, load_from_cache, save_to_cache

logger = logging.getLogger(__name__)

DEFAULT_KERNEL_SIZE = 15
DEFAULT_SIGMA_RATIO = 0.3
DEFAULT_NEIGHBOR_CAP = 40
KERNEL_ITERATIONS = 10_000
KERNEL_MEAN_RADIUS = 0.66

KERNEL_FILE_MAGIC = b"RIKP"
KERNEL_FILE_VERSION = 1
_KERNEL_HEADER = struct.Struct("<4sIIdq")


@dataclass
class KernelDisposition:
    """Kernel points inside the ball of radius ``radius`` and their influence width."""

    points: np.ndarray
    radius: float
    sigma: float
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.points)


def encode_kernel_file(points: np.ndarray, radius: float, seed: int) -> bytes:
    header = _KERNEL_HEADER.pack(
        KERNEL_FILE_MAGIC, KERNEL_FILE_VERSION, len(points), float(radius), int(seed)
    )
    return header + np.ascontiguousarray(points, dtype="<f8").tobytes()


def decode_kernel_file(raw: bytes) -> Tuple[np.ndarray, float, int]:
    if len(raw) < _KERNEL_HEADER.size:
        raise ValueError("Kernel file is shorter than its header")
    magic, version, count, radius, seed = _KERNEL_HEADER.unpack_from(raw)
    if magic != KERNEL_FILE_MAGIC:
        raise ValueError(f"Bad kernel file magic {magic!r}")
    if version != KERNEL_FILE_VERSION:
        raise ValueError(f"Unsupported kernel file version {version}")
    body = raw[_KERNEL_HEADER.size:]
    if len(body) != count * 3 * 8:
        raise ValueError(f"Kernel file holds {len(body)} bytes, expected {count * 24}")
    points = np.frombuffer(body, dtype="<f8").reshape(count, 3).astype(np.float64)
    return points, radius, seed


@lru_cache(maxsize=32)
def _unit_kernel_points(count: int, seed: int, iterations: int) -> np.ndarray:
    """Repulsion-based disposition in the unit ball, first point fixed at the origin."""
    if count == 1:
        return np.zeros((1, 3))
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(count - 1, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    movable = directions * rng.uniform(0.2, 0.8, size=(count - 1, 1))
    points = np.vstack([np.zeros((1, 3)), movable])

    step = 1e-2
    for _ in range(iterations):
        diff = points[:, None, :] - points[None, :, :]
        dist2 = np.sum(diff * diff, axis=2)
        np.fill_diagonal(dist2, np.inf)
        # gradient of sum(1 / d) + 5 |x|^2
        grads = -np.sum(diff / dist2[:, :, None] ** 1.5, axis=1) + 10.0 * points
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        moves = np.minimum(step, norms) * grads / np.maximum(norms, 1e-12)
        moves[0] = 0.0
        points = points - moves
        lengths = np.linalg.norm(points, axis=1, keepdims=True)
        points = np.where(lengths > 1.0, points / np.maximum(lengths, 1e-12), points)
        step *= 0.9995

    mean_radius = np.mean(np.linalg.norm(points[1:], axis=1))
    points[1:] *= KERNEL_MEAN_RADIUS / mean_radius
    lengths = np.linalg.norm(points, axis=1, keepdims=True)
    return np.divide(points, lengths, out=points.copy(), where=lengths > 1.0)


def generate_kernel_points(
    count: int = DEFAULT_KERNEL_SIZE,
    radius: float = 1.0,
    seed: int = 0,
    sigma: Optional[float] = None,
    sigma_ratio: float = DEFAULT_SIGMA_RATIO,
    use_cache: bool = True,
    cache_dir: str = CACHE_DIRS["kernels"],
    iterations: int = KERNEL_ITERATIONS,
) -> KernelDisposition:
    """Deterministic kernel disposition for (count, radius, seed).

    Points minimize a 1/d repulsion with a quadratic pull toward the center
    by clipped, projected gradient steps for a fixed number of iterations;
    the first point stays at the origin. Results are cached on disk.
    """
    if count < 1:
        raise ValueError(f"Kernel size must be at least 1, got {count}")
    if radius <= 0:
        raise ValueError(f"Kernel radius must be positive, got {radius}")
    sigma = sigma if sigma is not None else sigma_ratio * radius

    cache_key = generate_cache_key(
        {"count": count, "radius": float(radius), "seed": seed, "iterations": iterations,
         "version": KERNEL_FILE_VERSION}
    )
    if use_cache:
        cached = load_from_cache(cache_key, decode_kernel_file, cache_dir)
        if cached is not None and len(cached[0]) == count:
            return KernelDisposition(cached[0], radius, sigma, seed)

    points = _unit_kernel_points(count, seed, iterations) * radius
    if use_cache:
        save_to_cache(
            cache_key, points, lambda p: encode_kernel_file(p, radius, seed), cache_dir
        )
    logger.debug(f"Generated {count} kernel points for radius {radius} (seed {seed})")
    return KernelDisposition(points.copy(), radius, sigma, seed)


def influence(offset, kernel_point, sigma: float) -> float:
    """Linear influence ``max(0, 1 - |offset - kernel_point| / sigma)``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    distance = np.linalg.norm(np.asarray(offset, float) - np.asarray(kernel_point, float))
    return float(max(0.0, 1.0 - distance / sigma))


def _influences(offsets: np.ndarray, disposition: KernelDisposition) -> np.ndarray:
    diff = offsets[:, None, :] - disposition.points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return np.maximum(0.0, 1.0 - dist / disposition.sigma)


def kpconv_standard(
    query: np.ndarray,
    points: np.ndarray,
    features: np.ndarray,
    disposition: KernelDisposition,
    weights: np.ndarray,
    neighbors: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Unaligned KPConv at one query point.

    Args:
        query: (3,) query position.
        points: (N, 3) support points.
        features: (N, D) support features.
        disposition: Kernel points, radius and sigma.
        weights: (K, D, D_out) kernel weight matrices.
        neighbors: Optional neighbor indices; radius search when omitted.

    Returns:
        (D_out,) output row, aggregated per kernel point before applying W_k.
    """
    query = np.asarray(query, dtype=np.float64)
    if weights.shape[:2] != (disposition.size, features.shape[1]):
        raise ValueError(
            f"Kernel weights {weights.shape} do not match {disposition.size} kernel "
            f"points and feature width {features.shape[1]}"
        )
    if neighbors is None:
        neighbors = radius_neighbors(points, query[None], disposition.radius)[0]
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if neighbors.size == 0:
        return np.zeros(weights.shape[2])
    h = _influences(points[neighbors] - query, disposition)
    aggregated = h.T @ features[neighbors]
    return np.einsum("kd,kdo->o", aggregated, weights)


class LRFMlp:
    """Shared per-layer MLP encoding realigned neighbor frames as features."""

    def __init__(self, store: ParameterStore, name: str, num_alignments: int, width: int):
        hidden = 2 * width
        self.w1 = store.create(f"{name}.w1", (9 * num_alignments, hidden))
        self.b1 = store.create(f"{name}.b1", (1, hidden), init="zeros")
        self.w2 = store.create(f"{name}.w2", (hidden, width))
        self.b2 = store.create(f"{name}.b2", (1, width), init="zeros")

    def __call__(self, frames: Tensor) -> Tensor:
        hidden = relu(add(matmul(frames, self.w1.tensor()), self.b1.tensor()))
        return add(matmul(hidden, self.w2.tensor()), self.b2.tensor())


class AlignedConvParams:
    """Weights of one multi-aligned convolution.

    The weight matrix stacks the K kernel matrices W_k in ``[j][k][d]`` row
    order, where ``d`` runs over the ``2 * in_dim`` merged channels (or
    ``in_dim`` without LRF features).
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        num_alignments: int,
        in_dim: int,
        out_dim: int,
        kernel_size: int = DEFAULT_KERNEL_SIZE,
        merge_lrf: bool = True,
    ):
        self.name = name
        self.num_alignments = num_alignments
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.kernel_size = kernel_size
        self.merge_lrf = merge_lrf
        self.lrf_mlp = (
            LRFMlp(store, f"{name}.lrf_mlp", num_alignments, in_dim) if merge_lrf else None
        )
        rows = num_alignments * kernel_size * self.merged_dim
        self.weights: Parameter = store.create(
            f"{name}.weights", (rows, out_dim),
            fan_in=num_alignments * self.merged_dim * kernel_size,
        )

    @property
    def merged_dim(self) -> int:
        return 2 * self.in_dim if self.merge_lrf else self.in_dim

    @property
    def kernel_input_width(self) -> int:
        """Width of f_k'', the input of each W_k."""
        return self.num_alignments * self.merged_dim

    def kernel_weights(self) -> np.ndarray:
        """(K, J * merged_dim, D_out) view of the stacked weights."""
        j, k, d = self.num_alignments, self.kernel_size, self.merged_dim
        stacked = self.weights.data.reshape(j, k, d, self.out_dim)
        return stacked.transpose(1, 0, 2, 3).reshape(k, j * d, self.out_dim)

    def set_kernel_weights(self, kernels: np.ndarray):
        j, k, d = self.num_alignments, self.kernel_size, self.merged_dim
        kernels = np.asarray(kernels, dtype=np.float64)
        if kernels.shape != (k, j * d, self.out_dim):
            raise ValueError(
                f"Expected kernel weights of shape {(k, j * d, self.out_dim)}, "
                f"got {kernels.shape}"
            )
        stacked = kernels.reshape(k, j, d, self.out_dim).transpose(1, 0, 2, 3)
        self.weights.data = stacked.reshape(j * k * d, self.out_dim).copy()


def multi_align_conv(
    query_points: np.ndarray,
    query_frames: Tensor,
    support_points: np.ndarray,
    support_features: Tensor,
    support_frames: Optional[Tensor],
    neighbors: NeighborIndex,
    params: AlignedConvParams,
    disposition: KernelDisposition,
) -> Tensor:
    """Multi-aligned KPConv for every query point at once.

    Each (neighbor, alignment) pair becomes one row: offsets are rotated into
    the query frame j, neighbor frames are realigned by the same frame and
    encoded by the LRF mlp, and kernel-point aggregates are summed per
    (query, j) before the J aggregates are concatenated and multiplied by
    the stacked kernel weights.

    Args:
        query_points: (M, 3).
        query_frames: (M, 9J) flattened frame stacks.
        support_points: (N, 3).
        support_features: (N, D).
        support_frames: (N, 9J); unused when LRF features are disabled.
        neighbors: Query-to-support neighbor lists.
        params: Convolution weights.
        disposition: Kernel points and sigma.

    Returns:
        (M, D_out) tensor; queries without neighbors get zero rows.
    """
    j_count = params.num_alignments
    m = len(query_points)
    if query_frames.shape != (m, 9 * j_count):
        raise ValueError(
            f"Query frames {query_frames.shape} do not match {m} queries with "
            f"{j_count} alignments"
        )
    if support_features.cols != params.in_dim:
        raise ValueError(
            f"Support features have width {support_features.cols}, "
            f"convolution expects {params.in_dim}"
        )
    query_ids, support_ids = neighbors.edges()
    if len(query_ids) == 0:
        return Tensor(np.zeros((m, params.out_dim)))

    edge = np.repeat(np.arange(len(query_ids)), j_count)
    alignment = np.tile(np.arange(j_count), len(query_ids))
    slot = query_ids[edge] * j_count + alignment
    sources = support_ids[edge]

    frames = gather_rows(reshape(query_frames, (m * j_count, 9)), slot)
    offsets = Tensor((support_points[support_ids] - query_points[query_ids])[edge])
    aligned = frame_vecmul(frames, offsets, transpose=True)
    h = kernel_influence(aligned, disposition.points, disposition.sigma)

    features = gather_rows(support_features, sources)
    if params.merge_lrf:
        neighbor_frames = gather_rows(support_frames, sources)
        realigned = frame_matmul(frames, neighbor_frames, transpose_a=True)
        features = concat_cols([features, params.lrf_mlp(realigned)])

    aggregated = segment_sum(row_outer(h, features), slot, m * j_count)
    merged = reshape(
        aggregated, (m, j_count * disposition.size * params.merged_dim)
    )
    return matmul(merged, params.weights.tensor())


def align_inputs(
    query: np.ndarray,
    query_frame: np.ndarray,
    neighbor_points: np.ndarray,
    neighbor_frames: np.ndarray,
    features: np.ndarray,
    lrf_mlp: Optional[LRFMlp],
) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate neighbor offsets into the query frame and merge realigned frames.

    Args:
        query: (3,) query position.
        query_frame: (3, 3) frame R_x.
        neighbor_points: (n, 3).
        neighbor_frames: (n, J, 3, 3) neighbor frame stacks.
        features: (n, D) neighbor features.
        lrf_mlp: Encoder of the flattened ``R_xᵀ R_i`` stacks; None skips merging.

    Returns:
        (offsets y_i' of shape (n, 3), merged features of shape (n, 2D) or (n, D)).
    """
    query_frame = np.asarray(query_frame, dtype=np.float64)
    offsets = (np.asarray(neighbor_points) - np.asarray(query)) @ query_frame
    if lrf_mlp is None:
        return offsets, np.asarray(features, dtype=np.float64)
    realigned = np.matmul(query_frame.T, neighbor_frames)
    encoded = lrf_mlp(Tensor(realigned.reshape(len(neighbor_points), -1))).data
    return offsets, np.concatenate([features, encoded], axis=1)


def multi_align_kpconv(
    query: np.ndarray,
    query_frames: np.ndarray,
    points: np.ndarray,
    features: np.ndarray,
    frames: np.ndarray,
    params: AlignedConvParams,
    disposition: KernelDisposition,
    neighbors: Optional[np.ndarray] = None,
    neighbor_cap: Optional[int] = DEFAULT_NEIGHBOR_CAP,
) -> np.ndarray:
    """Multi-aligned KPConv at one query point.

    Args:
        query: (3,) query position.
        query_frames: (J, 3, 3) frames R_{x,j}.
        points: (N, 3) support points.
        features: (N, D) support features.
        frames: (N, J, 3, 3) support frame stacks.
        params: Convolution weights.
        disposition: Kernel points, radius and sigma.
        neighbors: Optional neighbor indices; capped radius search when omitted.
        neighbor_cap: Cap applied to the radius search.

    Returns:
        (D_out,) output row.
    """
    query = np.asarray(query, dtype=np.float64)
    if neighbors is None:
        index = radius_neighbors(points, query[None], disposition.radius, neighbor_cap)
    else:
        neighbors = np.sort(np.asarray(neighbors, dtype=np.int64))
        index = NeighborIndex(np.array([0, len(neighbors)]), neighbors)
    out = multi_align_conv(
        query[None],
        Tensor(np.asarray(query_frames, dtype=np.float64).reshape(1, -1)),
        np.asarray(points, dtype=np.float64),
        Tensor(features),
        Tensor(np.asarray(frames, dtype=np.float64).reshape(len(points), -1)),
        index,
        params,
        disposition,
    )
    return out.data[0]
