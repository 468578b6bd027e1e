"""
Geometry Service
Builds, inverts and differentiably applies affine / homography / thin-plate-spline
transforms to images and validity masks.

All parameters live in normalized image coordinates [-1, 1]^2 with pixel centers
at (2i + 1) / size - 1, so a transform is independent of image resolution.
Warping is backward: every output pixel pulls its value from the source location
given by the operator's backward map.
"""

from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Optional, Tuple

import kornia.geometry.transform as KGT
import torch
import torch.nn.functional as F

from ..schemas.training import TransformKind
from ..utils.errors import NonFiniteTensor, ShapeMismatch, SingularTransform

# B x C x H x W in [-1, 1]
ImageBatch = torch.Tensor
# B x 1 x H x W in [0, 1]
ValidityMask = torch.Tensor

DET_EPS = 1e-8
TPS_EXTENT = 0.9
IMAGE_FILL = -1.0
# Projective denominators below this are treated as points at infinity
W_EPS = 1e-6
# Grids and resampling run in float64; results are cast back to the input dtype
SAMPLING_DTYPE = torch.float64


@dataclass(frozen=True)
class TransformParams:
    """Raw regression target: theta is B x N for a given transform kind."""
    kind: TransformKind
    theta: torch.Tensor

    def __post_init__(self) -> None:
        if self.theta.dim() != 2:
            raise ShapeMismatch(f"theta must be B x N, got shape {tuple(self.theta.shape)}")
        n = self.theta.shape[1]
        if self.kind is TransformKind.TPS:
            grid = math.isqrt(n // 2)
            if n % 2 or grid < 2 or grid * grid * 2 != n:
                raise ShapeMismatch(f"TPS theta length must be 2*g^2 with g >= 2, got {n}")
        elif n != self.kind.parameter_count():
            raise ShapeMismatch(
                f"{self.kind.value} theta length must be {self.kind.parameter_count()}, got {n}"
            )

    @property
    def batch_size(self) -> int:
        return self.theta.shape[0]

    @property
    def tps_grid(self) -> int:
        return math.isqrt(self.theta.shape[1] // 2)


@dataclass(frozen=True)
class TransformOperator:
    """
    Executable form of a transform.

    matrix is B x 3 x 3 for AFFINE / HOMOGRAPHY and the B x (K+3) x 2 coefficient
    array of the TPS displacement field for TPS. TPS operators also carry their
    K x 2 source control points and the B x K x 2 control displacements.
    """
    kind: TransformKind
    matrix: torch.Tensor
    control_points: Optional[torch.Tensor] = None
    displacements: Optional[torch.Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.matrix.shape[0]

    def detach(self) -> "TransformOperator":
        return TransformOperator(
            kind=self.kind,
            matrix=self.matrix.detach(),
            control_points=self.control_points,
            displacements=None if self.displacements is None else self.displacements.detach(),
        )

    def select(self, index: torch.Tensor) -> "TransformOperator":
        """Keep the batch rows in index."""
        return TransformOperator(
            kind=self.kind,
            matrix=self.matrix[index],
            control_points=self.control_points,
            displacements=None if self.displacements is None else self.displacements[index],
        )


@dataclass(frozen=True)
class SamplingGrid:
    """B x H x W x 2 source coordinates (x, y) in normalized space."""
    coords: torch.Tensor


def identity_params(
    kind: TransformKind,
    tps_grid: int = 4,
    batch_size: int = 1,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> TransformParams:
    """
    Parameters of the identity transform.

    Args:
        kind: Transform family
        tps_grid: TPS control grid side (ignored for matrix kinds)
        batch_size: Number of identical rows

    Returns:
        TransformParams whose warp leaves any image unchanged
    """
    if kind is TransformKind.AFFINE:
        row = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=dtype, device=device)
    elif kind is TransformKind.HOMOGRAPHY:
        row = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], dtype=dtype, device=device)
    else:
        row = torch.zeros(kind.parameter_count(tps_grid), dtype=dtype, device=device)
    return TransformParams(kind=kind, theta=row.unsqueeze(0).repeat(batch_size, 1))


def tps_control_points(
    grid: int,
    dtype: torch.dtype = torch.float64,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Regular grid x grid control points over [-0.9, 0.9]^2, row-major, x fastest."""
    axis = torch.linspace(-TPS_EXTENT, TPS_EXTENT, grid, dtype=dtype, device=device)
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


def _tps_kernel(points: torch.Tensor, ctrl: torch.Tensor) -> torch.Tensor:
    """U(r) = r^2 log r^2 between M points and K control points -> M x K."""
    r2 = ((points.unsqueeze(1) - ctrl.unsqueeze(0)) ** 2).sum(-1)
    positive = r2 > 0
    safe = torch.where(positive, r2, torch.ones_like(r2))
    return torch.where(positive, r2 * torch.log(safe), torch.zeros_like(r2))


@lru_cache(maxsize=32)
def _tps_system(grid: int, dtype: torch.dtype, device: torch.device) -> Tuple[torch.Tensor, torch.Tensor]:
    """Control points and the (K+3) x (K+3) TPS system [[K, P], [P^T, 0]]."""
    ctrl = tps_control_points(grid, dtype=dtype, device=device)
    k = ctrl.shape[0]
    p = torch.cat([torch.ones(k, 1, dtype=dtype, device=device), ctrl], dim=1)
    system = torch.zeros(k + 3, k + 3, dtype=dtype, device=device)
    system[:k, :k] = _tps_kernel(ctrl, ctrl)
    system[:k, k:] = p
    system[k:, :k] = p.t()
    if int(torch.linalg.matrix_rank(system)) < k + 3:
        raise SingularTransform(f"TPS system for a {grid}x{grid} grid is rank-deficient")
    return ctrl, system


def _singular_rows(det: torch.Tensor) -> list:
    return (det.detach().abs() <= DET_EPS).nonzero().flatten().tolist()


def build_operator(params: TransformParams) -> TransformOperator:
    """
    Assemble the executable operator for a parameter batch.

    Args:
        params: Transform parameters

    Returns:
        3x3 matrices (row-major from theta, entry (3,3) = 1) or TPS coefficients

    Raises:
        SingularTransform: determinant at or below 1e-8, or rank-deficient TPS system
    """
    theta = params.theta
    if not torch.isfinite(theta.detach()).all():
        raise NonFiniteTensor("theta")
    b = theta.shape[0]

    if params.kind is TransformKind.TPS:
        ctrl, system = _tps_system(params.tps_grid, theta.dtype, theta.device)
        k = ctrl.shape[0]
        disp = theta.view(b, k, 2)
        rhs = torch.cat([disp, disp.new_zeros(b, 3, 2)], dim=1)
        coeffs = torch.linalg.solve(system.expand(b, k + 3, k + 3), rhs)
        return TransformOperator(
            kind=params.kind, matrix=coeffs, control_points=ctrl, displacements=disp
        )

    if params.kind is TransformKind.AFFINE:
        bottom = theta.new_tensor([0.0, 0.0, 1.0]).expand(b, 1, 3)
        matrix = torch.cat([theta.view(b, 2, 3), bottom], dim=1)
    else:
        matrix = torch.cat([theta, theta.new_ones(b, 1)], dim=1).view(b, 3, 3)

    bad = _singular_rows(torch.linalg.det(matrix.detach()))
    if bad:
        raise SingularTransform(f"Singular {params.kind.value} matrix", bad)
    return TransformOperator(kind=params.kind, matrix=matrix)


def normalize_operator(op: TransformOperator) -> TransformOperator:
    """Divide matrix kinds by their (3,3) entry; TPS passes through."""
    if op.kind is TransformKind.TPS:
        return op
    scale = op.matrix[:, 2:3, 2:3]
    bad = _singular_rows(scale.reshape(-1))
    if bad:
        raise SingularTransform("Cannot normalize: entry (3,3) vanishes", bad)
    return TransformOperator(kind=op.kind, matrix=op.matrix / scale)


def invert_operator(op: TransformOperator) -> TransformOperator:
    """
    Inverse transform.

    Matrix kinds get the exact inverse renormalized to (3,3) = 1. TPS has no
    closed-form inverse; it is approximated by the spline with negated control
    displacements.
    """
    if op.kind is TransformKind.TPS:
        theta = (-op.displacements).reshape(op.batch_size, -1)
        return build_operator(TransformParams(kind=op.kind, theta=theta))

    matrix = normalize_operator(op).matrix
    if op.kind is TransformKind.AFFINE:
        linear = matrix[:, :2, :2]
        bad = _singular_rows(torch.linalg.det(linear.detach()))
        if bad:
            raise SingularTransform("Singular affine matrix", bad)
        linear_inv = torch.linalg.inv(linear)
        shift_inv = -(linear_inv @ matrix[:, :2, 2:])
        bottom = matrix.new_tensor([0.0, 0.0, 1.0]).expand(op.batch_size, 1, 3)
        top = torch.cat([linear_inv, shift_inv], dim=2)
        return TransformOperator(kind=op.kind, matrix=torch.cat([top, bottom], dim=1))

    bad = _singular_rows(torch.linalg.det(matrix.detach()))
    if bad:
        raise SingularTransform("Singular homography", bad)
    return normalize_operator(TransformOperator(kind=op.kind, matrix=torch.linalg.inv(matrix)))


def operator_vector(op: TransformOperator) -> torch.Tensor:
    """
    Free-parameter representation, B x N: 6 affine entries, 8 homography
    entries (after normalization) or the 2K TPS control displacements.
    """
    b = op.batch_size
    if op.kind is TransformKind.TPS:
        return op.displacements.reshape(b, -1)
    matrix = normalize_operator(op).matrix
    if op.kind is TransformKind.AFFINE:
        return matrix[:, :2, :].reshape(b, 6)
    return matrix.reshape(b, 9)[:, :8]


def canonical_grid(
    height: int,
    width: int,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """H x W x 2 normalized pixel-center coordinates (x, y)."""
    xs = (2 * torch.arange(width, dtype=dtype, device=device) + 1) / width - 1
    ys = (2 * torch.arange(height, dtype=dtype, device=device) + 1) / height - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def generate_grid(op: TransformOperator, height: int, width: int) -> SamplingGrid:
    """
    Source coordinates for every output pixel.

    Matrix kinds pull output pixel p from op^-1 p (projective division included);
    TPS evaluates its map p + f(p) directly.
    """
    if height < 2 or width < 2:
        raise ShapeMismatch(f"Grid must be at least 2x2, got {height}x{width}")
    points = canonical_grid(height, width, SAMPLING_DTYPE, op.matrix.device).reshape(-1, 2)
    b = op.batch_size

    if op.kind is TransformKind.TPS:
        ctrl = op.control_points.to(dtype=points.dtype, device=points.device)
        basis = torch.cat(
            [_tps_kernel(points, ctrl), points.new_ones(points.shape[0], 1), points], dim=1
        )
        coords = points.unsqueeze(0) + torch.matmul(basis, op.matrix.to(SAMPLING_DTYPE))
    else:
        backward = invert_operator(op).matrix.to(SAMPLING_DTYPE)
        homog = torch.cat([points, points.new_ones(points.shape[0], 1)], dim=1)
        mapped = torch.matmul(homog, backward.transpose(1, 2))
        w = mapped[..., 2:]
        w = torch.where(w > W_EPS, w, torch.full_like(w, W_EPS))
        coords = mapped[..., :2] / w

    return SamplingGrid(coords=coords.view(b, height, width, 2))


def _match_batch(grid: torch.Tensor, batch_size: int) -> torch.Tensor:
    if grid.shape[0] == batch_size:
        return grid
    if grid.shape[0] == 1:
        return grid.expand(batch_size, -1, -1, -1)
    raise ShapeMismatch(f"Operator batch {grid.shape[0]} does not match image batch {batch_size}")


def _bilinear(values: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    return F.grid_sample(values, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _check_batch(tensor: torch.Tensor, name: str) -> None:
    if tensor.dim() != 4:
        raise ShapeMismatch(f"{name} must be B x C x H x W, got shape {tuple(tensor.shape)}")


def warp(image: ImageBatch, op: TransformOperator) -> Tuple[ImageBatch, ValidityMask]:
    """
    Bilinearly resample image through op.

    Samples falling outside the source frame take the fill value -1 (black);
    the returned mask is the same resampling applied to an all-ones image.
    Differentiable with respect to image values and to the operator.
    """
    _check_batch(image, "image")
    b, _, h, w = image.shape
    grid = _match_batch(generate_grid(op, h, w).coords, b)
    mask = _bilinear(grid.new_ones(b, 1, h, w), grid)
    warped = _bilinear(image.to(SAMPLING_DTYPE), grid) + IMAGE_FILL * (1 - mask)
    return warped.to(image.dtype), mask.to(image.dtype)


def warp_mask(mask: ValidityMask, op: TransformOperator) -> ValidityMask:
    """Resample a validity mask through op with fill value 0."""
    _check_batch(mask, "mask")
    b, _, h, w = mask.shape
    grid = _match_batch(generate_grid(op, h, w).coords, b)
    return _bilinear(mask.to(SAMPLING_DTYPE), grid).to(mask.dtype)


def homography_from_corners(src: torch.Tensor, dst: torch.Tensor) -> TransformOperator:
    """
    Homography mapping four source points onto four destination points.

    Args:
        src: B x 4 x 2 points
        dst: B x 4 x 2 points

    Returns:
        HOMOGRAPHY operator with src -> dst as its forward map
    """
    if src.shape != dst.shape or src.shape[1:] != (4, 2):
        raise ShapeMismatch("homography_from_corners expects two B x 4 x 2 tensors")
    matrix = KGT.get_perspective_transform(src, dst)
    theta = (matrix / matrix[:, 2:3, 2:3]).reshape(src.shape[0], 9)[:, :8]
    return build_operator(TransformParams(kind=TransformKind.HOMOGRAPHY, theta=theta))
