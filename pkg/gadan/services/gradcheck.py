"""
Gradient Check Service
Compares autograd gradients of warping, every loss and the full cycle chain
against central finite differences on small float64 instances.
"""

import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import torch

from ..models.networks import init_networks
from ..schemas.reports import GradientCheckEntry, GradientCheckReport
from ..schemas.training import TrainConfig, TransformKind
from .geometry import (
    TransformParams,
    build_operator,
    canonical_grid,
    identity_params,
    warp,
)
from .losses import (
    AdversarialSide,
    adversarial_losses,
    appearance_cycle_loss,
    cycle_loss,
    identity_loss,
    region_missing_loss,
    spatial_cycle_loss,
)

logger = logging.getLogger(__name__)

COMPONENT_TOL = 1e-3
CHAIN_TOL = 1e-2
# Steps near 1e-4 straddle bilinear kinks and inflate the relative error
FD_STEP = 1e-6
PROBE_SIZE = 16
SAMPLED_ENTRIES = 12

Objective = Callable[[torch.Tensor], torch.Tensor]


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max|analytic - numeric| / max(max|numeric|, 1e-12)."""
    scale = max(float(numeric.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale


def probe_config(kind: TransformKind, seed: int = 0) -> TrainConfig:
    """Smallest configuration the full network stack accepts."""
    return TrainConfig(
        transform_kind=kind,
        image_size=PROBE_SIZE,
        channels=1,
        localization_size=32,
        code_dim=4,
        generator_channels=4,
        residual_blocks=1,
        discriminator_channels=4,
        seed=seed,
        domain_x_dir=Path("."),
        domain_y_dir=Path("."),
        checkpoint_dir=Path("."),
    )


def smooth_images(gen: torch.Generator, batch: int, channels: int, size: int) -> torch.Tensor:
    """Low-frequency random patterns in [-0.8, 0.8] (float64)."""
    grid = canonical_grid(size, size, dtype=torch.float64)
    phase = torch.rand(batch, channels, 2, 1, 1, generator=gen, dtype=torch.float64) * 6.28
    freq = 1.0 + torch.rand(batch, channels, 2, 1, 1, generator=gen, dtype=torch.float64) * 2.0
    return 0.8 * torch.sin(freq[:, :, 0] * grid[..., 0] + phase[:, :, 0]) * torch.cos(
        freq[:, :, 1] * grid[..., 1] + phase[:, :, 1]
    )


def random_theta(kind: TransformKind, gen: torch.Generator, batch: int = 1) -> torch.Tensor:
    """Identity plus a generic perturbation, float64."""
    base = identity_params(kind, batch_size=batch, dtype=torch.float64).theta
    noise = torch.randn(base.shape, generator=gen, dtype=torch.float64)
    if kind is TransformKind.AFFINE:
        return base + 0.08 * noise
    if kind is TransformKind.HOMOGRAPHY:
        scale = torch.tensor([0.08] * 6 + [0.02] * 2, dtype=torch.float64)
        return base + scale * noise
    return base + 0.05 * noise


def _compare(
    fn: Objective,
    base: torch.Tensor,
    indices: Optional[Sequence[int]] = None,
    h: float = FD_STEP,
) -> float:
    flat_size = base.numel()
    picked = list(range(flat_size)) if indices is None else list(indices)

    leaf = base.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(leaf), leaf)
    analytic = grad.reshape(-1)[picked]

    numeric = []
    with torch.no_grad():
        for i in picked:
            plus = base.detach().clone().reshape(-1)
            minus = plus.clone()
            plus[i] += h
            minus[i] -= h
            numeric.append((fn(plus.view_as(base)) - fn(minus.view_as(base))) / (2 * h))
    return relative_error(analytic, torch.stack(numeric))


def _sample(gen: torch.Generator, size: int, count: int = SAMPLED_ENTRIES) -> List[int]:
    return torch.randperm(size, generator=gen)[:count].tolist()


def _entry(component: str, error: float, tol: float, kind: Optional[TransformKind] = None) -> GradientCheckEntry:
    return GradientCheckEntry(
        component=component,
        kind=None if kind is None else kind.value,
        max_rel_error=error,
        tolerance=tol,
        passed=error <= tol,
    )


def _warp_entries(kind: TransformKind, gen: torch.Generator) -> List[GradientCheckEntry]:
    image = smooth_images(gen, 1, 2, PROBE_SIZE)
    theta = random_theta(kind, gen)
    weights = torch.randn(image.shape, generator=gen, dtype=torch.float64)

    def through_theta(t: torch.Tensor) -> torch.Tensor:
        warped, _ = warp(image, build_operator(TransformParams(kind, t)))
        return (warped * weights).sum()

    op = build_operator(TransformParams(kind, theta))

    def through_pixels(img: torch.Tensor) -> torch.Tensor:
        warped, _ = warp(img, op)
        return (warped * weights).sum()

    return [
        _entry("warp/theta", _compare(through_theta, theta), COMPONENT_TOL, kind),
        _entry(
            "warp/pixels",
            _compare(through_pixels, image, _sample(gen, image.numel())),
            COMPONENT_TOL,
            kind,
        ),
    ]


def _loss_entries(gen: torch.Generator) -> List[GradientCheckEntry]:
    a = smooth_images(gen, 2, 3, PROBE_SIZE)
    b = smooth_images(gen, 2, 3, PROBE_SIZE)
    m = torch.rand(2, 1, PROBE_SIZE, PROBE_SIZE, generator=gen, dtype=torch.float64)
    m2 = torch.rand(2, 1, PROBE_SIZE, PROBE_SIZE, generator=gen, dtype=torch.float64)
    logits = [torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64) for _ in range(2)]
    t_logits = [torch.randn(2, generator=gen, dtype=torch.float64) for _ in range(2)]

    entries = [
        _entry(
            "appearance_cycle_loss",
            _compare(lambda v: appearance_cycle_loss(a, v), b, _sample(gen, b.numel())),
            COMPONENT_TOL,
        ),
        _entry(
            "region_missing_loss",
            _compare(lambda v: region_missing_loss(m, v), m2, _sample(gen, m2.numel())),
            COMPONENT_TOL,
        ),
        _entry(
            "identity_loss",
            _compare(lambda v: identity_loss(v, b, m), a, _sample(gen, a.numel())),
            COMPONENT_TOL,
        ),
        _entry(
            "adversarial_losses/generator",
            _compare(
                lambda v: adversarial_losses(None, v, None, t_logits[1], AdversarialSide.GENERATOR),
                logits[1],
            ),
            COMPONENT_TOL,
        ),
        _entry(
            "adversarial_losses/discriminator",
            _compare(
                lambda v: adversarial_losses(
                    logits[0], v, t_logits[0], t_logits[1], AdversarialSide.DISCRIMINATOR
                ),
                logits[1],
            ),
            COMPONENT_TOL,
        ),
    ]

    for kind in TransformKind:
        reference = build_operator(TransformParams(kind, random_theta(kind, gen)))
        theta = random_theta(kind, gen)
        error = _compare(
            lambda t: spatial_cycle_loss(build_operator(TransformParams(kind, t)), reference), theta
        )
        entries.append(_entry("spatial_cycle_loss", error, COMPONENT_TOL, kind))
    return entries


def _chain_entry(kind: TransformKind, seed: int, gen: torch.Generator) -> GradientCheckEntry:
    """cycle_loss through the whole bundle w.r.t. a few FC2 weights of S_X."""
    from .pipeline import run_cycle

    config = probe_config(kind, seed)
    nets = init_networks(config).double()
    with torch.no_grad():
        for ln in (nets.ln_x, nets.ln_y):
            ln.fc2.weight.normal_(0.0, 1e-3, generator=gen)
    x = smooth_images(gen, 1, config.channels, config.image_size)
    code = torch.randn(1, config.code_dim, generator=gen, dtype=torch.float64)
    weights = config.loss_weights
    fc2 = nets.ln_x.fc2.weight
    picked = _sample(gen, fc2.numel(), 6)

    def objective() -> torch.Tensor:
        return cycle_loss(run_cycle(nets, x, code), weights).total

    nets.zero_grad(set_to_none=True)
    objective().backward()
    analytic = fc2.grad.reshape(-1)[picked].clone()

    numeric = []
    with torch.no_grad():
        flat = fc2.view(-1)
        for i in picked:
            original = flat[i].item()
            flat[i] = original + FD_STEP
            plus = objective()
            flat[i] = original - FD_STEP
            minus = objective()
            flat[i] = original
            numeric.append((plus - minus) / (2 * FD_STEP))
    return _entry("cycle_loss/full_chain", relative_error(analytic, torch.stack(numeric)), CHAIN_TOL, kind)


def _constant_translation_entry() -> GradientCheckEntry:
    """A translated constant field is unchanged away from the borders."""
    image = torch.full((1, 1, PROBE_SIZE, PROBE_SIZE), 0.3, dtype=torch.float64)
    theta = torch.tensor([[1.0, 0.0, 0.1, 0.0, 1.0, 0.05]], dtype=torch.float64, requires_grad=True)
    warped, _ = warp(image, build_operator(TransformParams(TransformKind.AFFINE, theta)))
    (grad,) = torch.autograd.grad(warped[..., 3:-3, 3:-3].sum(), theta)
    magnitude = float(grad.abs().max())
    return GradientCheckEntry(
        component="warp/constant_interior",
        kind=TransformKind.AFFINE.value,
        max_rel_error=magnitude,
        tolerance=1e-12,
        passed=magnitude <= 1e-12,
    )


def gradient_check(seed: int = 0) -> GradientCheckReport:
    """
    Run every gradient comparison for one seed.

    Failures are report entries, never exceptions.
    """
    gen = torch.Generator().manual_seed(seed)
    entries: List[GradientCheckEntry] = []
    for kind in TransformKind:
        entries.extend(_warp_entries(kind, gen))
    entries.extend(_loss_entries(gen))
    for kind in TransformKind:
        entries.append(_chain_entry(kind, seed, gen))
    entries.append(_constant_translation_entry())

    for entry in entries:
        if not entry.passed:
            logger.warning(
                f"Gradient check failed: {entry.component} ({entry.kind}) "
                f"error {entry.max_rel_error:.3e} > {entry.tolerance:.0e}"
            )
    return GradientCheckReport(seed=seed, entries=entries, passed=all(e.passed for e in entries))
