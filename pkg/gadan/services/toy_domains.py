"""
Toy Domains Service
Synthetic unpaired domains for end-to-end runs and the oracles that score them.

Domain X holds bright, elongated, axis-aligned rectangles on a dark ground.
Domain Y holds the same scene family seen through random tilted homographies
and a Gaussian blur.
"""

import logging
import math
from pathlib import Path
from typing import Tuple, Union

import kornia.filters as KF
import numpy as np
import torch
import torch.nn.functional as F

from .data_io import encode_output
from .geometry import TransformOperator, canonical_grid, homography_from_corners, warp

logger = logging.getLogger(__name__)

GROUND = -1.0
BRIGHT = 0.8
MAX_TILT_DEG = 20.0
Y_BLUR_SIGMA = 1.0
CORNER_JITTER = 0.04
_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def gaussian_blur(images: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of a B x C x H x W batch, replicate borders."""
    if sigma <= 0:
        return images
    side = 2 * max(1, math.ceil(3 * sigma)) + 1
    return KF.gaussian_blur2d(images, (side, side), (sigma, sigma), border_type="replicate")


def render_rectangles(params: np.ndarray, size: int) -> torch.Tensor:
    """
    Rasterize axis-aligned rectangles.

    Args:
        params: count x 4 rows of (center x, center y, half width, half height)
            in normalized coordinates
        size: Image side

    Returns:
        count x 1 x size x size batch, BRIGHT inside and GROUND outside
    """
    grid = canonical_grid(size, size, dtype=torch.float64)
    p = torch.as_tensor(params, dtype=torch.float64).view(-1, 4, 1, 1)
    inside = ((grid[..., 0] - p[:, 0]).abs() <= p[:, 2]) & ((grid[..., 1] - p[:, 1]).abs() <= p[:, 3])
    images = torch.where(inside, torch.tensor(BRIGHT, dtype=torch.float64), torch.tensor(GROUND, dtype=torch.float64))
    return images.unsqueeze(1).float()


def _sample_rectangles(rng: np.random.Generator, count: int) -> np.ndarray:
    return np.stack(
        [
            rng.uniform(-0.1, 0.1, count),
            rng.uniform(-0.1, 0.1, count),
            rng.uniform(0.45, 0.7, count),
            rng.uniform(0.12, 0.22, count),
        ],
        axis=1,
    )


def tilt_homographies(tilts_deg: np.ndarray, rng: np.random.Generator) -> TransformOperator:
    """Homographies rotating the frame by each tilt, with a small perspective jitter."""
    count = len(tilts_deg)
    square = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    rad = np.deg2rad(tilts_deg)
    cos, sin = np.cos(rad)[:, None], np.sin(rad)[:, None]
    dst = np.stack(
        [cos * square[:, 0] - sin * square[:, 1], sin * square[:, 0] + cos * square[:, 1]], axis=-1
    )
    dst = dst + rng.uniform(-CORNER_JITTER, CORNER_JITTER, dst.shape)
    src = np.broadcast_to(square, dst.shape)
    return homography_from_corners(
        torch.as_tensor(np.ascontiguousarray(src), dtype=torch.float64),
        torch.as_tensor(dst, dtype=torch.float64),
    )


def make_toy_domains(
    out_dir: Union[str, Path], count: int = 200, size: int = 64, seed: int = 0
) -> Tuple[Path, Path]:
    """
    Write <out_dir>/x/*.png and <out_dir>/y/*.png.

    Returns:
        (x folder, y folder)
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    x_dir, y_dir = out / "x", out / "y"

    x_images = render_rectangles(_sample_rectangles(rng, count), size)
    y_flat = render_rectangles(_sample_rectangles(rng, count), size).double()
    tilts = rng.uniform(-MAX_TILT_DEG, MAX_TILT_DEG, count)
    y_images, _ = warp(y_flat, tilt_homographies(tilts, rng))
    y_images = gaussian_blur(y_images, Y_BLUR_SIGMA).float()

    for i in range(count):
        encode_output(x_images[i].expand(3, -1, -1), x_dir / f"{i:05d}.png")
        encode_output(y_images[i].expand(3, -1, -1), y_dir / f"{i:05d}.png")
    logger.info(f"Wrote {count} toy images per domain to {out}")
    return x_dir, y_dir


def _gray(image: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    t = torch.as_tensor(image, dtype=torch.float64)
    if t.dim() == 4:
        t = t[0]
    if t.dim() == 3:
        t = t.mean(dim=0)
    return t


def estimate_tilt(image: Union[torch.Tensor, np.ndarray]) -> float:
    """
    Principal-axis angle of the bright region in degrees, folded into (-45, 45].

    Pixels are weighted by brightness above the dark ground; the angle comes
    from the second-order central moments.
    """
    gray = _gray(image)
    weights = ((gray + 1.0) / 2.0).clamp(0.0, 1.0)
    total = weights.sum()
    if total <= 0:
        return 0.0
    h, w = gray.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
    )
    cx, cy = (weights * xs).sum() / total, (weights * ys).sum() / total
    mu20 = (weights * (xs - cx) ** 2).sum() / total
    mu02 = (weights * (ys - cy) ** 2).sum() / total
    mu11 = (weights * (xs - cx) * (ys - cy)).sum() / total
    angle = 0.5 * math.degrees(math.atan2(2 * float(mu11), float(mu20 - mu02)))
    while angle > 45.0:
        angle -= 90.0
    while angle <= -45.0:
        angle += 90.0
    return angle


def laplacian_energy(image: Union[torch.Tensor, np.ndarray]) -> float:
    """Mean squared 4-neighbour Laplacian over the image interior (sharpness proxy)."""
    gray = _gray(image)
    gray = gray.view(1, 1, *gray.shape)
    response = F.conv2d(gray, _LAPLACIAN.to(gray.dtype).view(1, 1, 3, 3))
    return float((response ** 2).mean())
