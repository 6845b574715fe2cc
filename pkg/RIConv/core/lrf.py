"""
Rotation-equivariant local reference frames.

Frames are eigenvector bases of local (or global) covariance matrices with a
sign convention that commutes with rotations, stored as right-handed 3x3
matrices whose columns are the axes.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .geometry import PointCloud, knn

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-14
MAX_SWEEPS = 64
DEGENERATE_RATIO = 1e-12
EIGEN_GAP_RATIO = 1e-9
TIE_TOLERANCE = 1e-10

DEFAULT_SCALES = (20, 40, 80, 160)

_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass
class LRFSet:
    """Per-point stacks of J frames.

    Attributes:
        frames: (N, J, 3, 3) array, columns are frame axes.
        degenerate: (N, J) flags for frames that fell back to the global frame.
        equivariant: False when some frame could not be oriented consistently
            or the global fallback itself was ill-defined.
    """

    frames: np.ndarray
    degenerate: np.ndarray
    equivariant: bool = True

    @property
    def num_points(self) -> int:
        return self.frames.shape[0]

    @property
    def num_alignments(self) -> int:
        return self.frames.shape[1]

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())

    def flat(self) -> np.ndarray:
        """(N, 9J) layout used by the convolution operators, row-major per frame."""
        return self.frames.reshape(self.num_points, 9 * self.num_alignments)

    def rotated(self, rotation: np.ndarray) -> "LRFSet":
        return LRFSet(
            np.matmul(rotation, self.frames),
            self.degenerate.copy(),
            self.equivariant,
        )


def jacobi_eigh(matrices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver for a batch of symmetric 3x3 matrices.

    Args:
        matrices: (n, 3, 3) or (3, 3) symmetric matrices.

    Returns:
        (eigenvalues, eigenvectors), eigenvalues in descending order and
        eigenvectors as the matching columns.
    """
    single = matrices.ndim == 2
    a = np.array(matrices, dtype=np.float64).reshape(-1, 3, 3)
    n = a.shape[0]
    v = np.tile(np.eye(3), (n, 1, 1))
    scale = np.sqrt(np.sum(a * a, axis=(1, 2)))

    for _ in range(MAX_SWEEPS):
        off = np.sqrt(a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2)
        if np.all(off <= EIGEN_TOLERANCE * scale):
            break
        for p, q in _PAIRS:
            apq = a[:, p, q]
            active = apq != 0.0
            safe = np.where(active, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            sign = np.where(theta >= 0, 1.0, -1.0)
            t = sign / (np.abs(theta) + np.hypot(theta, 1.0))
            c = np.where(active, 1.0 / np.hypot(t, 1.0), 1.0)
            s = np.where(active, t * c, 0.0)
            rot = np.tile(np.eye(3), (n, 1, 1))
            rot[:, p, p] = c
            rot[:, q, q] = c
            rot[:, p, q] = s
            rot[:, q, p] = -s
            a = np.matmul(np.matmul(rot.transpose(0, 2, 1), a), rot)
            v = np.matmul(v, rot)

    values = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-values, axis=1, kind="stable")
    values = np.take_along_axis(values, order, axis=1)
    vectors = np.take_along_axis(v, order[:, None, :], axis=2)
    if single:
        return values[0], vectors[0]
    return values, vectors


def _is_degenerate(values: np.ndarray) -> np.ndarray:
    """Rank-deficient or repeated-eigenvalue spectra (descending order)."""
    top = values[..., 0]
    safe = np.where(top > 0, top, 1.0)
    rank_deficient = (top <= 0) | (values[..., 2] / safe < DEGENERATE_RATIO)
    repeated = ((values[..., 0] - values[..., 1]) / safe < EIGEN_GAP_RATIO) | (
        (values[..., 1] - values[..., 2]) / safe < EIGEN_GAP_RATIO
    )
    return rank_deficient | repeated


def orient_frames(
    eigvecs: np.ndarray, neighborhoods: np.ndarray, centers: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched sign convention; see ``orient_frame``.

    Args:
        eigvecs: (n, 3, 3) orthonormal columns.
        neighborhoods: (n, k, 3) neighbor coordinates.
        centers: (n, 3) frame origins.

    Returns:
        (frames, unresolved) where unresolved marks frames whose orientation
        tie could not be broken.
    """
    frames = np.array(eigvecs, dtype=np.float64)
    projections = np.einsum("nkd,ndc->nkc", neighborhoods - centers[:, None, :], frames)
    unresolved = np.zeros(len(frames), dtype=bool)
    rows = np.arange(len(frames))

    for col in (0, 1):
        proj = projections[:, :, col]
        total = proj.sum(axis=1)
        magnitude = np.abs(proj)
        tie = np.abs(total) <= TIE_TOLERANCE * magnitude.sum(axis=1)
        sign = np.where(total < 0, -1.0, 1.0)

        lead = np.argmax(magnitude, axis=1)
        lead_value = proj[rows, lead]
        lead_size = np.abs(lead_value)
        rival = (
            np.abs(magnitude - lead_size[:, None]) <= TIE_TOLERANCE * lead_size[:, None]
        ) & (np.sign(proj) != np.sign(lead_value)[:, None])
        stuck = tie & ((lead_size == 0) | rival.any(axis=1))
        tie_sign = np.where(lead_value < 0, -1.0, 1.0)
        sign = np.where(tie, np.where(stuck, 1.0, tie_sign), sign)
        unresolved |= stuck
        frames[:, :, col] *= sign[:, None]

    frames[:, :, 2] = np.cross(frames[:, :, 0], frames[:, :, 1])
    return frames, unresolved


def orient_frame(
    eigvecs: np.ndarray, neighborhood: np.ndarray, center: np.ndarray
) -> Tuple[np.ndarray, bool]:
    """Fix eigenvector signs so the frame commutes with rotations.

    Column 1 is flipped so that the projections of ``neighborhood - center``
    sum to a nonnegative value, column 2 likewise, and column 3 is set to
    their cross product. A vanishing sum falls back to making the neighbor
    with the largest absolute projection positive; a second tie keeps the
    sign and sets the returned flag.
    """
    frames, unresolved = orient_frames(
        np.asarray(eigvecs)[None], np.asarray(neighborhood)[None], np.asarray(center)[None]
    )
    return frames[0], bool(unresolved[0])


def _points(source: Union[PointCloud, np.ndarray]) -> np.ndarray:
    return source.points if isinstance(source, PointCloud) else np.asarray(source, float)


def global_pca_frame(source: Union[PointCloud, np.ndarray]) -> Tuple[np.ndarray, bool]:
    """Oriented PCA frame of the whole cloud about its centroid.

    Returns:
        (frame, degenerate); degenerate frames are unreliable under rotation.
    """
    points = _points(source)
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    values, vectors = jacobi_eigh(cov)
    frame, unresolved = orient_frame(vectors, points, centroid)
    return frame, bool(_is_degenerate(values) or unresolved)


def _local_frames(points: np.ndarray, neighbor_idx: np.ndarray):
    neighborhoods = points[neighbor_idx]
    mean = neighborhoods.mean(axis=1, keepdims=True)
    centered = neighborhoods - mean
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbor_idx.shape[1]
    values, vectors = jacobi_eigh(cov)
    frames, unresolved = orient_frames(vectors, neighborhoods, points)
    return frames, _is_degenerate(values) | unresolved


def _apply_fallback(points, frames, flagged):
    if not flagged.any():
        return True
    frame, global_degenerate = global_pca_frame(points)
    if global_degenerate:
        frame = np.eye(3)
    frames[flagged] = frame
    logger.warning(
        f"{int(flagged.sum())} of {len(frames)} local frames are degenerate; "
        "using the global frame for them"
    )
    return not global_degenerate


def local_pca_lrf(source: Union[PointCloud, np.ndarray], k: int) -> LRFSet:
    """Per-point PCA frames of the k nearest neighbors (J = 1)."""
    return multi_scale_lrf_init(source, [k])


def multi_scale_lrf_init(
    source: Union[PointCloud, np.ndarray], scales: Sequence[int] = DEFAULT_SCALES
) -> LRFSet:
    """Stack local PCA frames computed at several neighborhood sizes.

    Scales larger than the cloud clamp to its size. The k-NN search runs once
    at the largest scale; smaller scales reuse its distance-ordered prefix.
    """
    if not scales:
        raise ValueError("At least one LRF scale is required")
    points = _points(source)
    n = len(points)
    if any(k < 3 for k in scales):
        raise ValueError(f"LRF scales must be at least 3, got {list(scales)}")
    if n < 3:
        raise ValueError(f"Local frames need at least 3 points, got {n}")
    clamped = [min(k, n) for k in scales]
    neighbor_idx = knn(points, points, max(clamped)).as_array()

    stacks, flags = [], []
    equivariant = True
    for k in clamped:
        frames, flagged = _local_frames(points, neighbor_idx[:, :k])
        equivariant &= _apply_fallback(points, frames, flagged)
        stacks.append(frames)
        flags.append(flagged)
    return LRFSet(np.stack(stacks, axis=1), np.stack(flags, axis=1), equivariant)


def global_lrf_init(source: Union[PointCloud, np.ndarray], num_alignments: int = 1) -> LRFSet:
    """Every point carries the global PCA frame (the one-global variant)."""
    points = _points(source)
    frame, degenerate = global_pca_frame(points)
    if degenerate:
        logger.warning("Global PCA frame is degenerate; equivariance not guaranteed")
    frames = np.broadcast_to(frame, (len(points), num_alignments, 3, 3)).copy()
    flags = np.full((len(points), num_alignments), degenerate)
    return LRFSet(frames, flags, not degenerate)


def identity_lrf_init(source: Union[PointCloud, np.ndarray], num_alignments: int = 1) -> LRFSet:
    """Axis-aligned frames; convolutions then reduce to the unaligned operator."""
    n = len(_points(source))
    frames = np.broadcast_to(np.eye(3), (n, num_alignments, 3, 3)).copy()
    return LRFSet(frames, np.zeros((n, num_alignments), dtype=bool), False)


def pool_lrf_nearest(source: LRFSet, carry: np.ndarray) -> LRFSet:
    """Each subsampled point keeps the frame stack of its nearest original point."""
    carry = np.asarray(carry, dtype=np.int64)
    if carry.size and (carry.min() < 0 or carry.max() >= source.num_points):
        raise ValueError("Carry-over indices out of range for the source LRF set")
    return LRFSet(source.frames[carry], source.degenerate[carry], source.equivariant)


def project_to_so3(frames: np.ndarray) -> np.ndarray:
    """Nearest rotation to each 3x3 matrix (polar decomposition by SVD)."""
    u, _, vt = np.linalg.svd(frames)
    det = np.linalg.det(np.matmul(u, vt))
    u[..., :, 2] *= np.where(det < 0, -1.0, 1.0)[..., None]
    return np.matmul(u, vt)
