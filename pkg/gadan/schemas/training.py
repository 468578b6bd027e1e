"""
Pydantic schemas for run configuration, loss weights and training metrics.
"""
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class TransformKind(str, Enum):
    """Supported spatial transform families."""
    AFFINE = "affine"
    HOMOGRAPHY = "homography"
    TPS = "tps"

    def parameter_count(self, tps_grid: int = 4) -> int:
        """Length of theta: 6 affine, 8 homography, 2K for a K-point TPS grid."""
        if self is TransformKind.AFFINE:
            return 6
        if self is TransformKind.HOMOGRAPHY:
            return 8
        return 2 * tps_grid * tps_grid


class CycleDirection(str, Enum):
    """Which half of the cycle is running."""
    X2Y = "X2Y"
    Y2X = "Y2X"


class LossWeights(BaseModel):
    """Weights of the training objective terms."""
    model_config = ConfigDict(allow_inf_nan=False)

    lambda_acl: float = Field(10.0, ge=0, description="Appearance cycle-consistency weight")
    lambda_scl: float = Field(1.0, ge=0, description="Spatial cycle-consistency weight")
    lambda_idt: float = Field(5.0, ge=0, description="Identity loss weight")
    lambda_adv: float = Field(1.0, ge=0, description="Adversarial (generator side) weight")
    lambda_rml: float = Field(1.0, ge=0, description="Region missing loss weight")


class TrainConfig(BaseModel):
    """Complete run configuration, read from a flat key = value file."""
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, use_enum_values=False)

    # Geometry
    transform_kind: TransformKind = Field(..., description="affine | homography | tps")
    tps_grid: int = Field(4, ge=2, le=16, description="TPS control grid side (K = tps_grid^2)")
    transform_bound: float = Field(0.35, gt=0, description="Max |theta - identity| per entry")

    # Images
    image_size: int = Field(256, ge=16, description="Square training resolution")
    channels: int = Field(3, description="Image channels (1 or 3)")
    localization_size: int = Field(256, ge=32, description="Localization net input side")

    # Networks
    code_dim: int = Field(16, ge=1, description="Spatial code dimension d_z")
    generator_channels: int = Field(64, ge=1, description="Base width of the generators")
    residual_blocks: int = Field(0, ge=0, description="0 = automatic (9 at >=256px, else 6)")
    discriminator_channels: int = Field(64, ge=1, description="Base width of patch discriminators")

    # Optimization
    batch_size: int = Field(1, ge=1)
    steps: int = Field(10000, ge=0)
    lr_g: float = Field(2e-4, gt=0, description="Spatial modules + generators learning rate")
    lr_d: float = Field(2e-4, gt=0, description="Discriminators learning rate")
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    seed: int = Field(0, ge=0)

    # Objective
    lambda_acl: float = Field(10.0, ge=0)
    lambda_scl: float = Field(1.0, ge=0)
    lambda_idt: float = Field(5.0, ge=0)
    lambda_adv: float = Field(1.0, ge=0)
    lambda_rml: float = Field(1.0, ge=0)
    disentangled_cycle: bool = Field(True, description="False = image-space cycle ablation")
    replay_buffer_size: int = Field(0, ge=0, description="Discriminator image pool (0 = off)")

    # I/O
    domain_x_dir: Path = Field(..., description="Source domain image folder")
    domain_y_dir: Path = Field(..., description="Target domain image folder")
    checkpoint_dir: Path = Field(..., description="Checkpoints and metrics output folder")
    checkpoint_every: int = Field(1000, ge=1)
    log_every: int = Field(50, ge=1)

    @field_validator("channels")
    @classmethod
    def _known_channels(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        return value

    @field_validator("image_size")
    @classmethod
    def _multiple_of_4(cls, value: int) -> int:
        if value % 4 != 0:
            raise ValueError("image_size must be a multiple of 4 (two stride-2 generator stages)")
        return value

    @field_validator("localization_size")
    @classmethod
    def _multiple_of_32(cls, value: int) -> int:
        if value % 32 != 0:
            raise ValueError("localization_size must be a multiple of 32 (five 2x2 poolings)")
        return value

    @model_validator(mode="after")
    def _resolve_blocks(self) -> "TrainConfig":
        if self.residual_blocks == 0:
            self.residual_blocks = 9 if self.image_size >= 256 else 6
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_acl=self.lambda_acl,
            lambda_scl=self.lambda_scl,
            lambda_idt=self.lambda_idt,
            lambda_adv=self.lambda_adv,
            lambda_rml=self.lambda_rml,
        )

    @property
    def parameter_count(self) -> int:
        return self.transform_kind.parameter_count(self.tps_grid)


class CycleLossReport(BaseModel):
    """Scalar values of every objective term for one cycle direction."""
    acl: float = Field(..., description="Appearance cycle-consistency loss")
    scl: float = Field(..., description="Spatial cycle-consistency loss")
    rml: float = Field(..., description="Region missing loss")
    cycle_total: float = Field(..., description="Weighted cycle objective")
    adv_g: float = Field(..., description="Generator-side adversarial loss")
    adv_d: float = Field(..., description="Discriminator-side adversarial loss")
    idt: float = Field(..., description="Masked identity loss")


class MetricsRecord(CycleLossReport):
    """One line of the metrics log."""
    step: int = Field(..., ge=0)
    direction: CycleDirection


class MetricsHeader(BaseModel):
    """First line of a metrics log: the resolved configuration."""
    header: Literal["config"] = "config"
    resumed_from: Optional[int] = None
    config: Dict[str, Any]
