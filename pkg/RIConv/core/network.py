"""
Classification and segmentation networks built from rotation-invariant
residual blocks, their training objective and checkpoint serialization.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    Parameter,
    ParameterStore,
    Tensor,
    add,
    concat_cols,
    gather_rows,
    softmax_cross_entropy,
)
from .conv import KernelDisposition, generate_kernel_points
from .geometry import NeighborIndex, PointCloud, grid_subsample_equivariant, knn, radius_neighbors
from .layers import (
    BlockInputs,
    ClassificationHead,
    Linear,
    ResidualBlock,
    ResidualBlockSpec,
    UnaryBlock,
    global_average_pool,
    nearest_upsample,
)
from .lrf import (
    LRFSet,
    global_lrf_init,
    identity_lrf_init,
    multi_scale_lrf_init,
    project_to_so3,
)
from .utils.cache_utils import CACHE_DIRS

logger = logging.getLogger(__name__)

TASKS = ("classify", "segment")
VARIANTS = ("full", "no_merge", "one_local", "one_global", "standard")

CHECKPOINT_MAGIC = b"RICONVCK"
CHECKPOINT_VERSION = 1


class ArchitectureError(ValueError):
    """Raised when an architecture description is inconsistent."""

    pass


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded."""

    pass


def default_blocks(
    channels: Sequence[int], input_dim: int, **block_kwargs
) -> List[ResidualBlockSpec]:
    """Two blocks at the first level, then a strided and a plain block per level.

    The first block reads the raw input features without batch norm.
    """
    blocks = [
        ResidualBlockSpec(
            "block0", input_dim, channels[0], level=0, normalize_input=False, **block_kwargs
        ),
        ResidualBlockSpec("block1", channels[0], channels[0], level=0, **block_kwargs),
    ]
    for level in range(1, len(channels)):
        previous, width = channels[level - 1], channels[level]
        blocks.append(
            ResidualBlockSpec(
                f"block{len(blocks)}", previous, width, strided=True, level=level,
                **block_kwargs,
            )
        )
        blocks.append(
            ResidualBlockSpec(f"block{len(blocks)}", width, width, level=level, **block_kwargs)
        )
    return blocks


@dataclass
class ArchitectureSpec:
    """Declarative network description.

    Variants adjust the alignment machinery: ``no_merge`` drops the LRF
    features, ``one_local`` keeps a single frame from the smallest scale,
    ``one_global`` uses the global PCA frame everywhere and ``standard`` is
    the unaligned baseline (identity frames, no LRF features, no updates).
    """

    task: str = "classify"
    num_classes: int = 8
    input_dim: int = 1
    grid_size: float = 0.06
    radius_ratio: float = 2.5
    sigma_ratio: float = 0.3
    kernel_size: int = 15
    kernel_seed: int = 0
    num_alignments: int = 4
    omega: float = 0.5
    lrf_scales: List[int] = field(default_factory=lambda: [20, 40, 80, 160])
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    neighbor_cap: int = 40
    variant: str = "full"
    project_lrfs: bool = False
    blocks: List[ResidualBlockSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArchitectureError(
                f"Unknown variant '{self.variant}'. Expected one of: {', '.join(VARIANTS)}"
            )
        self.lrf_scales = [int(k) for k in self.lrf_scales]
        self.channels = [int(c) for c in self.channels]
        if self.variant in ("one_local", "one_global", "standard"):
            self.num_alignments = 1
        if self.variant == "one_local":
            self.lrf_scales = self.lrf_scales[:1]
        if not self.blocks:
            self.blocks = default_blocks(
                self.channels,
                self.input_dim,
                num_alignments=self.num_alignments,
                merge_lrf=self.merge_lrf,
                update_lrf=self.update_lrf,
                kernel_size=self.kernel_size,
            )
        else:
            self.blocks = [
                b if isinstance(b, ResidualBlockSpec) else ResidualBlockSpec(**b)
                for b in self.blocks
            ]
        self.validate()

    @property
    def merge_lrf(self) -> bool:
        return self.variant not in ("no_merge", "standard")

    @property
    def update_lrf(self) -> bool:
        return self.variant != "standard"

    @property
    def num_levels(self) -> int:
        return max(b.level for b in self.blocks) + 1

    def level_grid(self, level: int) -> float:
        return self.grid_size * 2 ** level

    def level_radius(self, level: int) -> float:
        return self.radius_ratio * self.level_grid(level)

    def block_radius(self, block: ResidualBlockSpec) -> float:
        return self.level_radius(block.level - 1 if block.strided else block.level)

    def level_widths(self) -> List[int]:
        widths = [0] * self.num_levels
        for block in self.blocks:
            widths[block.level] = block.out_channels
        return widths

    def validate(self):
        if self.task not in TASKS:
            raise ArchitectureError(f"Unknown task '{self.task}'. Expected classify or segment")
        if self.num_classes < 1 or self.input_dim < 1:
            raise ArchitectureError("num_classes and input_dim must be positive")
        if self.grid_size <= 0 or self.radius_ratio <= 0 or self.sigma_ratio <= 0:
            raise ArchitectureError("grid_size, radius_ratio and sigma_ratio must be positive")
        if self.variant in ("full", "no_merge") and self.num_alignments != len(self.lrf_scales):
            raise ArchitectureError(
                f"num_alignments ({self.num_alignments}) must equal the number of "
                f"lrf_scales ({len(self.lrf_scales)})"
            )
        if not self.blocks:
            raise ArchitectureError("An architecture needs at least one block")
        width, level = self.input_dim, 0
        for block in self.blocks:
            if block.in_channels != width:
                raise ArchitectureError(
                    f"{block.name}: expects {block.in_channels} input channels "
                    f"but receives {width}"
                )
            expected_level = level + 1 if block.strided else level
            if block.level != expected_level:
                raise ArchitectureError(
                    f"{block.name}: level {block.level} does not follow level {level}"
                    f"{' with a stride' if block.strided else ''}"
                )
            if block.num_alignments != self.num_alignments:
                raise ArchitectureError(
                    f"{block.name}: {block.num_alignments} alignments, "
                    f"architecture uses {self.num_alignments}"
                )
            width, level = block.out_channels, block.level

    def to_text(self) -> str:
        """Canonical text form echoed in checkpoints."""
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        try:
            values = json.loads(text)
        except json.JSONDecodeError as e:
            raise ArchitectureError(f"Invalid architecture text: {e}") from e
        return cls(**values)

    @classmethod
    def toy(cls, task: str = "classify", num_classes: int = 8, **overrides) -> "ArchitectureSpec":
        """Two-block network (one plain, one strided) for gradient checks and tests."""
        values = dict(
            task=task,
            num_classes=num_classes,
            grid_size=0.15,
            num_alignments=2,
            lrf_scales=[8, 16],
            channels=[8, 16],
            kernel_size=5,
        )
        values.update(overrides)
        spec = cls(**values)
        block_kwargs = dict(
            num_alignments=spec.num_alignments,
            merge_lrf=spec.merge_lrf,
            update_lrf=spec.update_lrf,
            kernel_size=spec.kernel_size,
        )
        spec.blocks = [
            ResidualBlockSpec(
                "block0", spec.input_dim, spec.channels[0], normalize_input=False, **block_kwargs
            ),
            ResidualBlockSpec(
                "block1", spec.channels[0], spec.channels[1], strided=True, level=1,
                **block_kwargs,
            ),
        ]
        spec.validate()
        return spec


@dataclass
class Pyramid:
    """Per-cloud geometry for every level of the network."""

    points: List[np.ndarray]
    conv_neighbors: List[NeighborIndex]
    pool_neighbors: List[NeighborIndex]
    carry: List[np.ndarray]
    upsample: List[np.ndarray]
    frames: LRFSet
    features: np.ndarray
    labels: Optional[np.ndarray]
    equivariant: bool


def initial_frames(cloud: PointCloud, spec: ArchitectureSpec) -> LRFSet:
    if spec.variant == "standard":
        return identity_lrf_init(cloud, spec.num_alignments)
    if spec.variant == "one_global":
        return global_lrf_init(cloud, spec.num_alignments)
    return multi_scale_lrf_init(cloud, spec.lrf_scales)


def build_pyramid(cloud: PointCloud, spec: ArchitectureSpec) -> Pyramid:
    """Subsample, search neighborhoods and initialize frames for one cloud."""
    features = cloud.features
    if features.shape[1] == 0:
        features = np.ones((len(cloud), 1))
    if features.shape[1] != spec.input_dim:
        raise ArchitectureError(
            f"Cloud features have width {features.shape[1]}, "
            f"architecture expects {spec.input_dim}"
        )
    equivariant = cloud.equivariant
    points = [cloud.points]
    carry = []
    for level in range(1, spec.num_levels):
        result = grid_subsample_equivariant(points[-1], spec.level_grid(level))
        points.append(result.cloud.points)
        carry.append(result.carry)
        equivariant &= result.equivariant

    conv_neighbors = [
        radius_neighbors(points[l], points[l], spec.level_radius(l), spec.neighbor_cap)
        for l in range(spec.num_levels)
    ]
    pool_neighbors = [
        radius_neighbors(points[l], points[l + 1], spec.level_radius(l), spec.neighbor_cap)
        for l in range(spec.num_levels - 1)
    ]
    upsample = [knn(points[l + 1], points[l], 1).indices for l in range(spec.num_levels - 1)]
    frames = initial_frames(cloud, spec)
    if spec.variant != "standard":
        equivariant &= frames.equivariant
    return Pyramid(points, conv_neighbors, pool_neighbors, carry, upsample, frames,
                   features, cloud.labels, equivariant)


@dataclass
class PackedBatch:
    """Several pyramids concatenated level by level."""

    points: List[np.ndarray]
    cloud_ids: List[np.ndarray]
    conv_neighbors: List[NeighborIndex]
    pool_neighbors: List[NeighborIndex]
    carry: List[np.ndarray]
    upsample: List[np.ndarray]
    frames: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray]
    num_clouds: int
    equivariant: bool
    degenerate_count: int


def pack_pyramids(pyramids: Sequence[Pyramid]) -> PackedBatch:
    num_levels = len(pyramids[0].points)
    sizes = [[len(p.points[l]) for p in pyramids] for l in range(num_levels)]
    starts = [np.concatenate([[0], np.cumsum(s)[:-1]]).astype(np.int64) for s in sizes]

    points = [np.concatenate([p.points[l] for p in pyramids]) for l in range(num_levels)]
    cloud_ids = [
        np.repeat(np.arange(len(pyramids)), sizes[l]) for l in range(num_levels)
    ]
    conv = [
        NeighborIndex.concat([p.conv_neighbors[l] for p in pyramids], sizes[l])
        for l in range(num_levels)
    ]
    pool = [
        NeighborIndex.concat([p.pool_neighbors[l] for p in pyramids], sizes[l])
        for l in range(num_levels - 1)
    ]
    carry = [
        np.concatenate([p.carry[l] + s for p, s in zip(pyramids, starts[l])])
        for l in range(num_levels - 1)
    ]
    upsample = [
        np.concatenate([p.upsample[l] + s for p, s in zip(pyramids, starts[l + 1])])
        for l in range(num_levels - 1)
    ]
    labels = None
    if all(p.labels is not None for p in pyramids):
        labels = np.concatenate([p.labels for p in pyramids])
    return PackedBatch(
        points,
        cloud_ids,
        conv,
        pool,
        carry,
        upsample,
        np.concatenate([p.frames.frames for p in pyramids]),
        np.concatenate([p.features for p in pyramids]),
        labels,
        len(pyramids),
        all(p.equivariant for p in pyramids),
        sum(p.frames.degenerate_count for p in pyramids),
    )


class Model:
    """Parameters, kernel dispositions and layers of one network."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0,
                 cache_dir: str = CACHE_DIRS["kernels"], use_cache: bool = True):
        self.spec = spec
        self.seed = seed
        self.store = ParameterStore(np.random.default_rng(seed))
        self._dispositions: Dict[float, KernelDisposition] = {}

        self.blocks = []
        for block in spec.blocks:
            radius = spec.block_radius(block)
            disposition = self._dispositions.get(radius)
            if disposition is None:
                disposition = generate_kernel_points(
                    block.kernel_size,
                    radius,
                    seed=spec.kernel_seed,
                    sigma_ratio=spec.sigma_ratio,
                    use_cache=use_cache,
                    cache_dir=cache_dir,
                )
                self._dispositions[radius] = disposition
            self.blocks.append(ResidualBlock(self.store, block, disposition, spec.omega))

        widths = spec.level_widths()
        if spec.task == "classify":
            self.head = ClassificationHead(self.store, "head", widths[-1], spec.num_classes)
            self.decoder = []
        else:
            self.decoder = [
                UnaryBlock(self.store, f"decoder{level}", widths[level] + widths[level - 1],
                           widths[level - 1])
                for level in range(spec.num_levels - 1, 0, -1)
            ]
            self.head_unary = UnaryBlock(self.store, "head.unary", widths[0], widths[0])
            self.head_out = Linear(self.store, "head.out", widths[0], spec.num_classes)

    @property
    def rng(self) -> np.random.Generator:
        return self.store.rng

    def parameters(self) -> List[Parameter]:
        return self.store.parameters()

    def parameter_count(self) -> int:
        return self.store.count()

    def zero_grad(self):
        self.store.zero_grad()


def build(spec: ArchitectureSpec, seed: int = 0, **kwargs) -> Model:
    """Initialize a model deterministically from its spec and seed."""
    model = Model(spec, seed, **kwargs)
    logger.info(
        f"Built {spec.task} model ({spec.variant}) with {len(model.blocks)} blocks and "
        f"{model.parameter_count()} parameters"
    )
    return model


@dataclass
class ForwardOutput:
    logits: Tensor
    ortho_loss: Tensor
    ortho_error: float
    min_det: float
    negative_dets: int
    degenerate_count: int
    equivariant: bool
    cloud_ids: np.ndarray
    labels: Optional[np.ndarray] = None


def forward(
    model: Model,
    clouds: Union[PointCloud, Pyramid, Sequence[Union[PointCloud, Pyramid]]],
    mode: str = "eval",
) -> ForwardOutput:
    """Run the network on one cloud or a packed batch of clouds.

    Classification yields one logit row per cloud, segmentation one row per
    level-0 point (clouds concatenated in order).
    """
    if isinstance(clouds, (PointCloud, Pyramid)):
        clouds = [clouds]
    if len(clouds) == 0:
        raise ValueError("forward: no clouds given")
    spec = model.spec
    pyramids = [c if isinstance(c, Pyramid) else build_pyramid(c, spec) for c in clouds]
    batch = pack_pyramids(pyramids)

    j = spec.num_alignments
    features = Tensor(batch.features)
    frames = Tensor(batch.frames.reshape(len(batch.features), 9 * j))
    ortho = Tensor(np.zeros((1, 1)))
    skips: Dict[int, Tensor] = {}
    updates = []

    for block in model.blocks:
        level = block.spec.level
        if block.spec.strided:
            query_frames = gather_rows(frames, batch.carry[level - 1])
            inputs = BlockInputs(
                batch.points[level - 1], features, frames,
                batch.points[level], query_frames, batch.pool_neighbors[level - 1],
            )
        else:
            inputs = BlockInputs(
                batch.points[level], features, frames,
                batch.points[level], frames, batch.conv_neighbors[level],
            )
        result = block(inputs, mode)
        features, frames = result.features, result.frames
        if mode == "eval" and spec.project_lrfs and result.updates is not None:
            projected = project_to_so3(frames.data.reshape(-1, 3, 3))
            frames = Tensor(projected.reshape(frames.shape))
        ortho = add(ortho, result.ortho_loss)
        if result.updates is not None:
            updates.append(result.updates.reshape(-1, 3, 3))
        skips[level] = features

    if spec.task == "classify":
        pooled = global_average_pool(features, batch.cloud_ids[-1], batch.num_clouds)
        logits = model.head(pooled)
        cloud_ids = np.arange(batch.num_clouds)
    else:
        x = features
        for unary, level in zip(model.decoder, range(spec.num_levels - 1, 0, -1)):
            up = nearest_upsample(x, nearest=batch.upsample[level - 1])
            x = unary(concat_cols([up, skips[level - 1]]), mode)
        logits = model.head_out(model.head_unary(x, mode))
        cloud_ids = batch.cloud_ids[0]

    ortho_error, min_det, negative = 0.0, 1.0, 0
    if updates:
        stacked = np.concatenate(updates)
        residual = np.eye(3) - np.matmul(stacked, stacked.transpose(0, 2, 1))
        ortho_error = float(np.mean(np.sqrt(np.sum(residual * residual, axis=(1, 2)))))
        dets = np.linalg.det(frames.data.reshape(-1, 3, 3))
        min_det, negative = float(dets.min()), int(np.sum(dets < 0))
        if negative:
            logger.warning(f"{negative} updated frames have a negative determinant")

    return ForwardOutput(
        logits, ortho, ortho_error, min_det, negative,
        batch.degenerate_count, batch.equivariant, cloud_ids, batch.labels,
    )


def total_loss(logits: Tensor, labels, ortho_loss: Tensor) -> Tensor:
    """Mean softmax cross-entropy plus the (already weighted) ortho-loss."""
    return add(softmax_cross_entropy(logits, labels), ortho_loss)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _sections(model: Model) -> List[tuple]:
    sections = [(name, p.data) for name, p in model.store.params.items()]
    for name, state in model.store.buffers.items():
        sections.append((f"{name}.mean", state.running_mean))
        sections.append((f"{name}.var", state.running_var))
    return sorted(sections, key=lambda item: item[0])


def _pack_bytes(blob: bytes) -> bytes:
    return struct.pack("<I", len(blob)) + blob


def encode_checkpoint(model: Model) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(_pack_bytes(model.spec.to_text().encode("utf-8")))
    parts.append(struct.pack("<q", model.seed))
    sections = _sections(model)
    parts.append(struct.pack("<I", len(sections)))
    for name, array in sections:
        parts.append(_pack_bytes(name.encode("utf-8")))
        parts.append(struct.pack("<II", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    rng_state = json.dumps(model.rng.bit_generator.state, sort_keys=True)
    parts.append(_pack_bytes(rng_state.encode("utf-8")))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (size,) = self.unpack("<I")
        return self.take(size)


def decode_checkpoint(raw: bytes, **build_kwargs) -> Model:
    reader = _Reader(raw)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic bytes)")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    spec = ArchitectureSpec.from_text(reader.blob().decode("utf-8"))
    (seed,) = reader.unpack("<q")
    model = build(spec, seed, **build_kwargs)

    expected = {name: array for name, array in _sections(model)}
    (count,) = reader.unpack("<I")
    loaded = {}
    for _ in range(count):
        name = reader.blob().decode("utf-8")
        rows, cols = reader.unpack("<II")
        data = np.frombuffer(reader.take(rows * cols * 8), dtype="<f8")
        loaded[name] = data.reshape(rows, cols).astype(np.float64)
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise CheckpointError(f"Checkpoint sections differ: missing {missing}, unexpected {extra}")

    for name, param in model.store.params.items():
        if loaded[name].shape != param.shape:
            raise CheckpointError(
                f"Section '{name}' has shape {loaded[name].shape}, expected {param.shape}"
            )
        param.data = loaded[name]
    for name, state in model.store.buffers.items():
        state.running_mean = loaded[f"{name}.mean"]
        state.running_var = loaded[f"{name}.var"]
    model.rng.bit_generator.state = json.loads(reader.blob().decode("utf-8"))
    if reader.pos != len(raw):
        raise CheckpointError("Trailing bytes after checkpoint payload")
    return model


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path], **build_kwargs) -> Model:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), **build_kwargs)
