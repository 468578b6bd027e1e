"""
Loss Service
Disentangled cycle-consistency (appearance, spatial, region-missing), adversarial
objectives for images and transforms, and the masked identity loss.
"""

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

import torch
import torch.nn.functional as F

from ..schemas.training import LossWeights
from ..utils.errors import KindMismatch, NonFiniteTensor, ShapeMismatch
from .geometry import ImageBatch, TransformOperator, ValidityMask, operator_vector

if TYPE_CHECKING:
    from .pipeline import CycleBundle


class AdversarialSide(str, Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


@dataclass
class CycleLossTerms:
    """Differentiable cycle objective and its components."""
    acl: torch.Tensor
    scl: torch.Tensor
    rml: torch.Tensor
    total: torch.Tensor


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def appearance_cycle_loss(x: ImageBatch, x_rec: ImageBatch) -> torch.Tensor:
    """Mean absolute difference between x and its inverse-path reconstruction."""
    _same_shape(x, x_rec, "appearance_cycle_loss")
    return (x - x_rec).abs().mean()


def spatial_cycle_loss(h_inv: TransformOperator, h_sy: TransformOperator) -> torch.Tensor:
    """
    L1 between the inverse forward transform and the backward module's prediction,
    computed on free-parameter vectors, never in image space.
    """
    if h_inv.kind is not h_sy.kind:
        raise KindMismatch(f"Cannot compare {h_inv.kind.value} with {h_sy.kind.value}")
    a, b = operator_vector(h_inv), operator_vector(h_sy)
    _same_shape(a, b, "spatial_cycle_loss")
    return (a - b).abs().mean()


def region_missing_loss(m: ValidityMask, m_roundtrip: ValidityMask) -> torch.Tensor:
    """Mean absolute difference between the forward mask and its round-trip warp."""
    _same_shape(m, m_roundtrip, "region_missing_loss")
    return (m - m_roundtrip).abs().mean()


def combine_cycle_terms(
    acl: torch.Tensor, scl: torch.Tensor, rml: torch.Tensor, w: LossWeights
) -> torch.Tensor:
    """lambda_acl * ACL + lambda_scl * SCL + lambda_rml * RML (lambda_rml defaults to 1)."""
    return w.lambda_acl * acl + w.lambda_scl * scl + w.lambda_rml * rml


def cycle_loss(bundle: "CycleBundle", w: LossWeights, disentangled: bool = True) -> CycleLossTerms:
    """
    Cycle objective for one direction.

    With disentangled=False the image-space ablation is used instead: L1 between
    x and the predicted-path reconstruction, plus the region missing loss. SCL is
    still computed for reporting but carries no weight.
    """
    scl = spatial_cycle_loss(bundle.H_XY_inv, bundle.H_SY)
    rml = region_missing_loss(bundle.m, bundle.m_roundtrip)
    if disentangled:
        acl = appearance_cycle_loss(bundle.x, bundle.x_rec_inv)
        total = combine_cycle_terms(acl, scl, rml, w)
    else:
        acl = appearance_cycle_loss(bundle.x, bundle.x_rec_pred)
        total = w.lambda_acl * acl + w.lambda_rml * rml
    return CycleLossTerms(acl=acl, scl=scl, rml=rml, total=total)


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    if not torch.isfinite(logits.detach()).all():
        raise NonFiniteTensor("discriminator output")
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def adversarial_losses(
    d_out_real: Optional[torch.Tensor],
    d_out_fake: torch.Tensor,
    dt_out_real: Optional[torch.Tensor],
    dt_out_fake: torch.Tensor,
    side: AdversarialSide,
) -> torch.Tensor:
    """
    Image + transform adversarial objective from discriminator logits.

    Discriminator side: BCE pushing real -> 1 (y, H_YX^-1) and fake -> 0
    (adapted x, H_XY), one mean-reduced term each, summed.
    Generator side: non-saturating BCE pushing both fakes -> 1; real outputs
    are ignored and may be None.
    """
    if side is AdversarialSide.GENERATOR:
        return _bce(d_out_fake, 1.0) + _bce(dt_out_fake, 1.0)
    if d_out_real is None or dt_out_real is None:
        raise ShapeMismatch("Discriminator side needs real outputs for images and transforms")
    return (
        _bce(d_out_real, 1.0)
        + _bce(d_out_fake, 0.0)
        + _bce(dt_out_real, 1.0)
        + _bce(dt_out_fake, 0.0)
    )


def identity_loss(translated: ImageBatch, transformed: ImageBatch, m: ValidityMask) -> torch.Tensor:
    """Mean |translated * m - transformed * m|; only valid-region pixels contribute."""
    _same_shape(translated, transformed, "identity_loss")
    if m.dim() != 4 or m.shape[0] != translated.shape[0] or m.shape[-2:] != translated.shape[-2:]:
        raise ShapeMismatch(f"identity_loss: mask {tuple(m.shape)} does not align with images")
    return (translated * m - transformed * m).abs().mean()
