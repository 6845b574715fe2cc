"""
Network building blocks: unary MLPs with batch norm, the LRF update, the
rotation-invariant residual block, pooling, upsampling and heads.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    ParameterStore,
    Tensor,
    add,
    batch_norm,
    frame_matmul,
    frobenius_sq,
    gather_rows,
    matmul,
    relu,
    reshape,
    scale,
    segment_max,
    segment_mean,
)
from .conv import AlignedConvParams, KernelDisposition, multi_align_conv
from .geometry import NeighborIndex, knn

logger = logging.getLogger(__name__)

DEFAULT_OMEGA = 0.5
LRF_UPDATE_INIT_GAIN = 1e-2


class Linear:
    """Row-wise affine map (a 1x1 convolution)."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int,
                 bias: bool = True, gain: float = 1.0):
        self.weight = store.create(f"{name}.w", (in_dim, out_dim), gain=gain)
        self.bias = store.create(f"{name}.b", (1, out_dim), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight.tensor())
        return add(out, self.bias.tensor()) if self.bias is not None else out


class BatchNorm:
    def __init__(self, store: ParameterStore, name: str, width: int):
        self.gamma = store.create(f"{name}.gamma", (1, width), init="ones")
        self.beta = store.create(f"{name}.beta", (1, width), init="zeros")
        self.state = store.add_buffer(f"{name}.running", width)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma.tensor(), self.beta.tensor(), self.state, mode)


class UnaryBlock:
    """Linear map, batch norm and an optional ReLU.

    Without batch norm the linear map carries a bias instead. Maps reading raw
    input features use this form: a constant input has zero batch variance, so
    a normalized map would discard its own weights.
    """

    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int,
                 activation: bool = True, norm: bool = True):
        self.linear = Linear(store, f"{name}.mlp", in_dim, out_dim, bias=not norm)
        self.norm = BatchNorm(store, f"{name}.bn", out_dim) if norm else None
        self.activation = activation

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        out = self.linear(x)
        if self.norm is not None:
            out = self.norm(out, mode)
        return relu(out) if self.activation else out


class LRFUpdate:
    """MLP mapping invariant features to J update matrices U_j per point.

    The output layer starts with small weights and a bias equal to the
    flattened identities, so initial updates are close to I.
    """

    def __init__(self, store: ParameterStore, name: str, width: int, num_alignments: int):
        self.num_alignments = num_alignments
        self.hidden = Linear(store, f"{name}.mlp.l1", width, width)
        self.output = Linear(
            store, f"{name}.mlp.l2", width, 9 * num_alignments, gain=LRF_UPDATE_INIT_GAIN
        )
        self.output.bias.data = np.tile(np.eye(3).reshape(1, 9), (1, num_alignments))

    def __call__(self, features: Tensor) -> Tensor:
        return self.output(relu(self.hidden(features)))


@dataclass
class LRFUpdateResult:
    frames: Tensor
    ortho_loss: Tensor
    updates: np.ndarray


def lrf_update(
    features: Tensor,
    previous: Tensor,
    params: LRFUpdate,
    omega: float = DEFAULT_OMEGA,
) -> LRFUpdateResult:
    """Compose each previous frame with an invariant update, ``R_j <- R_j U_j``.

    Args:
        features: (M, D) rotation-invariant features.
        previous: (M, 9J) flattened frame stacks.
        params: The update MLP.
        omega: Weight of the orthonormality penalty.

    Returns:
        New frames, ``omega * sum ||I - U_j U_jᵀ||²_F`` over points and frames,
        and the raw updates as an (M, J, 3, 3) array for diagnostics.
    """
    m, j = features.rows, params.num_alignments
    if previous.shape != (m, 9 * j):
        raise ValueError(
            f"Previous frames {previous.shape} do not match {m} points with {j} alignments"
        )
    updates = reshape(params(features), (m * j, 9))
    frames = frame_matmul(reshape(previous, (m * j, 9)), updates)
    gram = frame_matmul(updates, updates, transpose_b=True)
    residual = add(Tensor(np.tile(np.eye(3).reshape(1, 9), (m * j, 1))), scale(gram, -1.0))
    ortho = scale(frobenius_sq(residual), omega)
    return LRFUpdateResult(
        reshape(frames, (m, 9 * j)), ortho, updates.data.reshape(m, j, 3, 3)
    )


def max_pool_radius(features: Tensor, neighbors: NeighborIndex) -> Tensor:
    """Columnwise max over each neighborhood; empty neighborhoods give zeros."""
    query_ids, support_ids = neighbors.edges()
    return segment_max(gather_rows(features, support_ids), query_ids, neighbors.num_queries)


def nearest_upsample(
    coarse: Tensor,
    fine_points: Optional[np.ndarray] = None,
    coarse_points: Optional[np.ndarray] = None,
    nearest: Optional[np.ndarray] = None,
) -> Tensor:
    """Copy to every fine point the features of its nearest coarse point.

    ``nearest`` may carry precomputed indices; otherwise they are searched
    (ties resolve to the lower coarse index).
    """
    if nearest is None:
        if fine_points is None or coarse_points is None:
            raise ValueError("nearest_upsample needs point sets or precomputed indices")
        nearest = knn(coarse_points, fine_points, 1).indices
    return gather_rows(coarse, nearest)


def global_average_pool(
    features: Tensor, cloud_ids: Optional[np.ndarray] = None, num_clouds: int = 1
) -> Tensor:
    """Mean feature row per cloud."""
    if features.rows < 1:
        raise ValueError("Cannot pool an empty feature set")
    if cloud_ids is None:
        cloud_ids = np.zeros(features.rows, dtype=np.int64)
    return segment_mean(features, cloud_ids, num_clouds)


class ClassificationHead:
    def __init__(self, store: ParameterStore, name: str, width: int, num_classes: int):
        self.fc1 = Linear(store, f"{name}.fc1", width, width)
        self.fc2 = Linear(store, f"{name}.fc2", width, num_classes)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(pooled)))


def classification_head(pooled: Tensor, head: ClassificationHead) -> Tensor:
    return head(pooled)


@dataclass
class ResidualBlockSpec:
    name: str
    in_channels: int
    out_channels: int
    strided: bool = False
    level: int = 0
    num_alignments: int = 4
    merge_lrf: bool = True
    update_lrf: bool = True
    kernel_size: int = 15
    normalize_input: bool = True

    @property
    def bottleneck(self) -> int:
        return max(1, self.out_channels // 4)


@dataclass
class BlockInputs:
    """Geometry and signals for one block.

    For non-strided blocks the queries are the support points themselves.
    """

    support_points: np.ndarray
    support_features: Tensor
    support_frames: Tensor
    query_points: np.ndarray
    query_frames: Tensor
    neighbors: NeighborIndex


@dataclass
class BlockOutputs:
    features: Tensor
    frames: Tensor
    ortho_loss: Tensor
    updates: Optional[np.ndarray] = None


class ResidualBlock:
    """Bottleneck residual block around a multi-aligned convolution.

    Feature path: unary (in -> mid), convolution (mid -> mid) with batch norm
    and ReLU, unary (mid -> out) without activation, plus the shortcut, then
    ReLU. The shortcut is the identity, or a radius max-pool (strided) and a
    unary map (width change). With ``normalize_input`` off, the maps reading
    the block input skip batch norm. The frame path feeds the block output to the
    LRF update.
    """

    def __init__(self, store: ParameterStore, spec: ResidualBlockSpec,
                 disposition: KernelDisposition, omega: float = DEFAULT_OMEGA):
        self.spec = spec
        self.disposition = disposition
        self.omega = omega
        mid = spec.bottleneck
        self.unary1 = UnaryBlock(
            store, f"{spec.name}.unary1", spec.in_channels, mid, norm=spec.normalize_input
        )
        self.conv = AlignedConvParams(
            store,
            f"{spec.name}.conv",
            spec.num_alignments,
            mid,
            mid,
            kernel_size=spec.kernel_size,
            merge_lrf=spec.merge_lrf,
        )
        self.conv_norm = BatchNorm(store, f"{spec.name}.conv.bn", mid)
        self.unary2 = UnaryBlock(
            store, f"{spec.name}.unary2", mid, spec.out_channels, activation=False
        )
        self.shortcut = (
            UnaryBlock(
                store, f"{spec.name}.shortcut", spec.in_channels, spec.out_channels,
                activation=False, norm=spec.normalize_input,
            )
            if spec.in_channels != spec.out_channels
            else None
        )
        self.lrf_update = (
            LRFUpdate(store, f"{spec.name}.lrf_update", spec.out_channels, spec.num_alignments)
            if spec.update_lrf
            else None
        )

    def __call__(self, inputs: BlockInputs, mode: str) -> BlockOutputs:
        x = self.unary1(inputs.support_features, mode)
        x = multi_align_conv(
            inputs.query_points,
            inputs.query_frames,
            inputs.support_points,
            x,
            inputs.support_frames,
            inputs.neighbors,
            self.conv,
            self.disposition,
        )
        x = relu(self.conv_norm(x, mode))
        x = self.unary2(x, mode)

        skip = inputs.support_features
        if self.spec.strided:
            skip = max_pool_radius(skip, inputs.neighbors)
        if self.shortcut is not None:
            skip = self.shortcut(skip, mode)
        out = relu(add(x, skip))

        if self.lrf_update is None:
            return BlockOutputs(out, inputs.query_frames, Tensor(np.zeros((1, 1))))
        update = lrf_update(out, inputs.query_frames, self.lrf_update, self.omega)
        return BlockOutputs(out, update.frames, update.ortho_loss, update.updates)


def residual_block(inputs: BlockInputs, block: ResidualBlock, mode: str = "eval"):
    """Run one block; returns (features, frames, ortho-loss)."""
    result = block(inputs, mode)
    return result.features, result.frames, result.ortho_loss
