"""
RIConv core - autodiff engine, point-cloud geometry, LRFs, aligned convolutions,
networks, datasets, audits and training
"""

from .autodiff import NonFiniteError, ParameterStore, ShapeError, Tape, Tensor
from .geometry import NeighborIndex, PointCloud, knn, radius_neighbors
from .lrf import LRFSet, global_lrf_init, local_pca_lrf, multi_scale_lrf_init
from .conv import KernelDisposition, generate_kernel_points, kpconv_standard, multi_align_kpconv
from .network import (
    ArchitectureError,
    ArchitectureSpec,
    CheckpointError,
    Model,
    build,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .data import CloudFormatError, Dataset, load_cloud, preprocess, save_cloud, synth_shapes
from .config import ConfigError, RunConfig
from .verify import AuditReport, audit_equivariance, audit_invariance, run_audit_suite
from .training import Trainer, evaluate, train_model

__all__ = [
    "NonFiniteError",
    "ParameterStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "NeighborIndex",
    "PointCloud",
    "knn",
    "radius_neighbors",
    "LRFSet",
    "global_lrf_init",
    "local_pca_lrf",
    "multi_scale_lrf_init",
    "KernelDisposition",
    "generate_kernel_points",
    "kpconv_standard",
    "multi_align_kpconv",
    "ArchitectureError",
    "ArchitectureSpec",
    "CheckpointError",
    "Model",
    "build",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "CloudFormatError",
    "Dataset",
    "load_cloud",
    "preprocess",
    "save_cloud",
    "synth_shapes",
    "ConfigError",
    "RunConfig",
    "AuditReport",
    "audit_equivariance",
    "audit_invariance",
    "run_audit_suite",
    "Trainer",
    "evaluate",
    "train_model",
]
