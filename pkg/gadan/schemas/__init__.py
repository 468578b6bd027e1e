"""Schemas package initialization."""
from .reports import (
    GradientCheckEntry,
    GradientCheckReport,
    InvariantReport,
    PropertyResult,
)
from .training import (
    CycleDirection,
    CycleLossReport,
    LossWeights,
    MetricsHeader,
    MetricsRecord,
    TrainConfig,
    TransformKind,
)

__all__ = [
    "CycleDirection",
    "CycleLossReport",
    "GradientCheckEntry",
    "GradientCheckReport",
    "InvariantReport",
    "LossWeights",
    "MetricsHeader",
    "MetricsRecord",
    "PropertyResult",
    "TrainConfig",
    "TransformKind",
]
