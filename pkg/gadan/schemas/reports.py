"""
Pydantic schemas for verification reports (gradient checks, property suite,
toy end-to-end evaluation).
"""
from typing import List, Optional

from pydantic import BaseModel, Field


class GradientCheckEntry(BaseModel):
    """Analytic vs finite-difference comparison for one component."""
    component: str = Field(..., description="What was differentiated")
    kind: Optional[str] = Field(None, description="Transform kind, if any")
    max_rel_error: float = Field(..., description="max|analytic - numeric| / max|numeric|")
    tolerance: float
    passed: bool


class GradientCheckReport(BaseModel):
    """Full gradient-check run."""
    seed: int
    entries: List[GradientCheckEntry]
    passed: bool


class PropertyResult(BaseModel):
    """Outcome of one invariant check."""
    name: str
    passed: bool
    detail: str = ""


class InvariantReport(BaseModel):
    """Full property-suite run."""
    seed: int
    results: List[PropertyResult]
    passed: bool


class ToyEvaluationReport(BaseModel):
    """Scores of a trained checkpoint on the synthetic rectangle domains."""
    checkpoint_step: int
    images: int = Field(..., description="Adapted X images scored")
    views: int = Field(..., description="Views per image for the diversity score")

    # Geometry: tilt of adapted X should match domain Y
    mean_abs_tilt_adapted: float
    mean_abs_tilt_y: float
    tilt_relative_error: float
    tilt_passed: bool

    # Appearance: adapted X should be about as sharp as Y
    laplacian_x: float
    laplacian_y: float
    laplacian_adapted: float
    sharpness_passed: bool

    # Multi-modality: views of one image should spread over Y's tilt range
    view_tilt_std: float
    y_tilt_std: float
    diversity_passed: bool

    # Training trend from the metrics log; None when the run is too short
    loss_early: Optional[float] = None
    loss_late: Optional[float] = None
    loss_passed: Optional[bool] = None

    passed: bool
