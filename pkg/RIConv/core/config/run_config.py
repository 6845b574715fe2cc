"""
Run configuration for training, evaluation, audits and ablations.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from ..data import normalize_rotation_mode
from ..network import VARIANTS, ArchitectureSpec

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "RICONV_CONFIG"


class ConfigError(ValueError):
    """Raised for unknown keys, invalid values or unreadable config files."""

    pass


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        text = value.strip()
        if text.startswith("["):
            return json.loads(text)
        return [item.strip() for item in text.split(",") if item.strip()]
    return value


class RunConfig(BaseModel):
    """Every knob of a run, with defaults matching the reference architecture."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Task and data
    task: Literal["classify", "segment"] = "classify"
    variant: str = "full"
    dataset: str = "synthetic"
    n_per_class: int = 50
    n_test_per_class: int = 25
    points_per_shape: int = 1024
    input_feature: Literal["ones", "height"] = "ones"

    # Architecture
    grid_size: float = 0.06
    radius_ratio: float = 2.5
    sigma_ratio: float = 0.3
    kernel_size: int = 15
    kernel_seed: int = 0
    num_alignments: int = 4
    omega: float = 0.5
    lrf_scales: List[int] = [20, 40, 80, 160]
    channels: List[int] = [16, 32, 64, 128, 256]
    neighbor_cap: int = 40
    project_lrfs: bool = False

    # Training
    lr: float = 0.01
    momentum: float = 0.98
    lr_decay: float = 0.98
    grad_clip: float = 100.0
    epochs: int = 100
    batch: int = 8
    seed: int = 42

    # Augmentation
    train_rotation: str = "none"
    test_rotation: str = "none"
    jitter: float = 0.0
    scale_min: float = 1.0
    scale_max: float = 1.0

    # Ablation and audits
    omega_sweep: List[float] = [0.0, 0.1, 0.5, 1.0, 5.0]
    audit_rotations: int = 32
    audit_trials: int = 20
    network_audit_clouds: int = 16
    network_audit_rotations: int = 32
    parallelism: int = 1

    # Output
    output_dir: str = "runs/default"
    cache_dir: str = ".cache/kernels"

    @field_validator("lrf_scales", "channels", "omega_sweep", mode="before")
    @classmethod
    def _parse_lists(cls, value):
        return _split_list(value)

    @field_validator("train_rotation", "test_rotation")
    @classmethod
    def _rotation_mode(cls, value: str) -> str:
        return normalize_rotation_mode(value)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"variant must be one of {', '.join(VARIANTS)}")
        return value

    @field_validator("channels", "lrf_scales")
    @classmethod
    def _positive_list(cls, value: List[int]) -> List[int]:
        if not value or any(v <= 0 for v in value):
            raise ValueError("must be a nonempty list of positive integers")
        return value

    @model_validator(mode="after")
    def _consistency(self) -> "RunConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.scale_min <= 0 or self.scale_min > self.scale_max:
            raise ValueError("require 0 < scale_min <= scale_max")
        if self.grid_size <= 0 or self.radius_ratio <= 0 or self.sigma_ratio <= 0:
            raise ValueError("grid_size, radius_ratio and sigma_ratio must be positive")
        if self.variant in ("full", "no_merge") and self.num_alignments != len(self.lrf_scales):
            raise ValueError(
                f"num_alignments ({self.num_alignments}) must equal the number of "
                f"lrf_scales ({len(self.lrf_scales)})"
            )
        if min(self.epochs, self.batch, self.n_per_class, self.n_test_per_class) < 1:
            raise ValueError("epochs, batch, n_per_class and n_test_per_class must be positive")
        return self

    @classmethod
    def from_parameters(cls, **overrides) -> "RunConfig":
        """Defaults plus overrides; None-valued overrides are ignored."""
        values = {k: v for k, v in overrides.items() if v is not None}
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> "RunConfig":
        """Read ``key=value`` lines (``#`` comments), then apply overrides."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            raw = dotenv_values(path)
        except Exception as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        values: Dict[str, Any] = {k.strip().lower(): v for k, v in raw.items()}
        empty = [k for k, v in values.items() if v is None or v == ""]
        if empty:
            raise ConfigError(f"Config keys without values in {path}: {empty}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        logger.info(f"Loaded run configuration from {path}")
        return cls.from_parameters(**values)

    @classmethod
    def from_environment(cls, **overrides) -> "RunConfig":
        """Use the file named by ``RICONV_CONFIG`` if set, defaults otherwise."""
        path = os.getenv(CONFIG_ENV_VAR)
        if path:
            return cls.from_file(path, **overrides)
        return cls.from_parameters(**overrides)

    def to_text(self) -> str:
        """Canonical ``key=value`` text with sorted keys."""
        lines = []
        for key in sorted(type(self).model_fields):
            value = getattr(self, key)
            if isinstance(value, list):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def architecture(self, num_classes: int, input_dim: Optional[int] = None,
                     **overrides) -> ArchitectureSpec:
        """Architecture spec described by this configuration."""
        values = dict(
            task=self.task,
            num_classes=num_classes,
            input_dim=input_dim or (2 if self.input_feature == "height" else 1),
            grid_size=self.grid_size,
            radius_ratio=self.radius_ratio,
            sigma_ratio=self.sigma_ratio,
            kernel_size=self.kernel_size,
            kernel_seed=self.kernel_seed,
            num_alignments=self.num_alignments,
            omega=self.omega,
            lrf_scales=list(self.lrf_scales),
            channels=list(self.channels),
            neighbor_cap=self.neighbor_cap,
            variant=self.variant,
            project_lrfs=self.project_lrfs,
        )
        values.update(overrides)
        return ArchitectureSpec(**values)
