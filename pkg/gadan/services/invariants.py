"""
Invariant Suite Service
Property checks over geometry, losses, networks and image I/O, bundled into
one report.
"""

import logging
from pathlib import Path
import tempfile
from typing import Callable, List, Tuple

import numpy as np
from PIL import Image
import torch

from ..models.networks import complete_background, discriminate_transform, init_networks
from ..schemas.reports import InvariantReport, PropertyResult
from ..schemas.training import LossWeights, TransformKind
from ..utils.errors import GADANError
from .data_io import BatchCursor, decode_image, encode_output, epoch_order, load_domain, next_batch
from .geometry import (
    IMAGE_FILL,
    TransformOperator,
    TransformParams,
    build_operator,
    homography_from_corners,
    identity_params,
    invert_operator,
    normalize_operator,
    warp,
    warp_mask,
)
from .gradcheck import probe_config, random_theta
from .losses import (
    appearance_cycle_loss,
    combine_cycle_terms,
    identity_loss,
    region_missing_loss,
    spatial_cycle_loss,
)
from .toy_domains import gaussian_blur

logger = logging.getLogger(__name__)

IDENTITY_TOL = 1e-6
# Power-of-two and non-power-of-two sides
IDENTITY_SIZES = (32, 100)
INVERSE_TOL = 1e-9
INVERSE_SAMPLES = 1000
ROUND_TRIP_SEEDS = 100
ROUND_TRIP_TOL = 0.05
ROUND_TRIP_SIGMA = 1.5
# Per-axis corner offset; keeps each corner within 25% of the frame width (2.0)
ROUND_TRIP_CORNER_SHIFT = 0.35
TPS_ROUND_TRIP_TOL = 0.08
# 10% of the frame width
TPS_MAX_DISPLACEMENT = 0.2
ORACLE_TOL = 1e-6

Check = Callable[[torch.Generator], Tuple[bool, str]]
_EYE = torch.eye(3, dtype=torch.float64)


def _projective_gap(product: torch.Tensor) -> float:
    """Distance from the identity after scaling each product to (3,3) = 1."""
    return float((product / product[:, 2:3, 2:3] - _EYE).abs().max())


def _identity_warp(gen: torch.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for size in IDENTITY_SIZES:
        image = torch.rand(2, 3, size, size, generator=gen) * 2 - 1
        for kind in TransformKind:
            op = build_operator(identity_params(kind, batch_size=2))
            warped, mask = warp(image, op)
            worst = max(worst, float((warped - image).abs().max()), float((mask - 1).abs().max()))
    return worst <= IDENTITY_TOL, f"max deviation {worst:.2e}"


def _homography_inverse(gen: torch.Generator) -> Tuple[bool, str]:
    theta = random_theta(TransformKind.HOMOGRAPHY, gen, batch=INVERSE_SAMPLES)
    op = build_operator(TransformParams(TransformKind.HOMOGRAPHY, theta))
    inverse = invert_operator(op).matrix
    worst = _projective_gap(op.matrix @ inverse)

    # Adjugate oracle: rows of the transposed inverse are cross products of rows
    r0, r1, r2 = op.matrix[:, 0], op.matrix[:, 1], op.matrix[:, 2]
    adjugate = torch.stack([torch.cross(r1, r2, dim=-1), torch.cross(r2, r0, dim=-1), torch.cross(r0, r1, dim=-1)], dim=2)
    adjugate = adjugate / adjugate[:, 2:3, 2:3]
    oracle_gap = float((adjugate - inverse).abs().max())
    ok = worst <= INVERSE_TOL and oracle_gap <= INVERSE_TOL
    return ok, f"max |H H^-1 - I| {worst:.2e}, adjugate gap {oracle_gap:.2e} over {INVERSE_SAMPLES} samples"


def _double_inverse(gen: torch.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for kind in (TransformKind.AFFINE, TransformKind.HOMOGRAPHY):
        op = build_operator(TransformParams(kind, random_theta(kind, gen, batch=64)))
        back = invert_operator(invert_operator(op))
        worst = max(worst, float((normalize_operator(op).matrix - back.matrix).abs().max()))
    return worst <= INVERSE_TOL, f"max |inv(inv(H)) - H| {worst:.2e}"


def _mask_consistency(gen: torch.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for kind in TransformKind:
        op = build_operator(TransformParams(kind, random_theta(kind, gen, batch=2)))
        image = torch.rand(2, 3, 32, 32, generator=gen, dtype=torch.float64)
        _, mask = warp(image, op)
        worst = max(worst, float((mask - warp_mask(torch.ones_like(mask), op)).abs().max()))
    return worst == 0.0, f"max mask difference {worst:.2e}"


def _corner_homography(gen: torch.Generator) -> TransformOperator:
    corners = torch.tensor([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], dtype=torch.float64)
    shift = (torch.rand(1, 4, 2, generator=gen, dtype=torch.float64) * 2 - 1) * ROUND_TRIP_CORNER_SHIFT
    return homography_from_corners(corners.unsqueeze(0), corners.unsqueeze(0) + shift)


def _round_trip(gen: torch.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(ROUND_TRIP_SEEDS):
        noise = torch.rand(1, 1, 32, 32, generator=gen, dtype=torch.float64) * 2 - 1
        image = gaussian_blur(noise, ROUND_TRIP_SIGMA)
        op = _corner_homography(gen)
        forward, mask = warp(image, op)
        back, back_mask = warp(forward, invert_operator(op))
        valid = (warp_mask(mask, invert_operator(op)) > 0.99) & (back_mask > 0.99)
        if valid.sum() == 0:
            continue
        worst = max(worst, float((back - image).abs()[valid].mean()))
    return worst <= ROUND_TRIP_TOL, f"worst interior L1 {worst:.4f} over {ROUND_TRIP_SEEDS} samples"


def _conservation(gen: torch.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for kind in TransformKind:
        op = build_operator(TransformParams(kind, random_theta(kind, gen, batch=2)))
        image = torch.rand(2, 3, 32, 32, generator=gen, dtype=torch.float64) * 1.2 - 0.4
        warped, _ = warp(image, op)
        low = min(IMAGE_FILL, float(image.min()))
        high = max(IMAGE_FILL, float(image.max()))
        worst = max(worst, low - float(warped.min()), float(warped.max()) - high)
    return worst <= 1e-12, f"max excursion {worst:.2e}"


def _tps_round_trip(gen: torch.Generator) -> Tuple[bool, str]:
    worst = 0.0
    per_axis = TPS_MAX_DISPLACEMENT / 2
    for _ in range(20):
        image = gaussian_blur(torch.rand(1, 1, 32, 32, generator=gen, dtype=torch.float64) * 2 - 1, ROUND_TRIP_SIGMA)
        n = TransformKind.TPS.parameter_count()
        theta = (torch.rand(1, n, generator=gen, dtype=torch.float64) * 2 - 1) * per_axis
        op = build_operator(TransformParams(TransformKind.TPS, theta))
        forward, mask = warp(image, op)
        back, back_mask = warp(forward, invert_operator(op))
        valid = (warp_mask(mask, invert_operator(op)) > 0.99) & (back_mask > 0.99)
        if valid.sum() == 0:
            continue
        worst = max(worst, float((back - image).abs()[valid].mean()))
    return worst <= TPS_ROUND_TRIP_TOL, f"worst interior L1 {worst:.4f} (negated-displacement inverse)"


def _loop_mean_abs(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        total += abs(u - v)
    return total / a.size


def _loss_identities(gen: torch.Generator) -> Tuple[bool, str]:
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    m = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    m2 = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    op = build_operator(TransformParams(TransformKind.HOMOGRAPHY, random_theta(TransformKind.HOMOGRAPHY, gen)))
    ident = build_operator(identity_params(TransformKind.HOMOGRAPHY, dtype=torch.float64))

    exact = [
        float(appearance_cycle_loss(x, x)),
        float(spatial_cycle_loss(op, op)),
        float(region_missing_loss(m, warp_mask(m, ident))),
        float(identity_loss(x, x, m)),
    ]
    oracle_gap = max(
        abs(float(appearance_cycle_loss(x, y)) - _loop_mean_abs(x.numpy(), y.numpy())),
        abs(float(region_missing_loss(m, m2)) - _loop_mean_abs(m.numpy(), m2.numpy())),
        abs(float(identity_loss(x, y, m)) - _loop_mean_abs((x * m).numpy(), (y * m).numpy())),
    )
    one = torch.tensor(1.0)
    combined = float(combine_cycle_terms(one, one, one, LossWeights(lambda_acl=10, lambda_scl=1)))
    ok = all(v == 0.0 for v in exact) and oracle_gap <= ORACLE_TOL and combined == 12.0
    return ok, f"identities {exact}, oracle gap {oracle_gap:.2e}, weighted sum {combined}"


def _identity_cascade(gen: torch.Generator) -> Tuple[bool, str]:
    from .pipeline import run_cycle

    details = []
    ok = True
    for kind in TransformKind:
        config = probe_config(kind)
        nets = init_networks(config).double()
        x = torch.rand(2, config.channels, config.image_size, config.image_size, generator=gen, dtype=torch.float64) * 2 - 1
        code = torch.randn(2, config.code_dim, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            b = run_cycle(nets, x, code)
            scl = float(spatial_cycle_loss(b.H_XY_inv, b.H_SY))
            rml = float(region_missing_loss(b.m, b.m_roundtrip))
            drift = float((b.transformed - x).abs().max())
            if kind is not TransformKind.TPS:
                inverse_gap = _projective_gap(b.H_XY_inv.matrix @ b.H_XY.matrix)
            else:
                inverse_gap = 0.0
        passed = scl == 0.0 and rml == 0.0 and drift <= IDENTITY_TOL and bool((b.m == 1).all()) and inverse_gap <= INVERSE_TOL
        ok = ok and passed
        details.append(f"{kind.value}: scl={scl:.1e} rml={rml:.1e} drift={drift:.1e}")
    return ok, "; ".join(details)


def _transform_scale_invariance(gen: torch.Generator) -> Tuple[bool, str]:
    config = probe_config(TransformKind.HOMOGRAPHY)
    d_t = init_networks(config).d_t.double()
    op = build_operator(TransformParams(TransformKind.HOMOGRAPHY, random_theta(TransformKind.HOMOGRAPHY, gen, batch=4)))
    scaled = TransformOperator(kind=op.kind, matrix=op.matrix * 2.5)
    with torch.no_grad():
        gap = float((discriminate_transform(d_t, op) - discriminate_transform(d_t, scaled)).abs().max())
    return gap <= 1e-9, f"max logit change {gap:.2e}"


def _completion_pass_through(gen: torch.Generator) -> Tuple[bool, str]:
    config = probe_config(TransformKind.AFFINE)
    gen_pair = init_networks(config).g_x
    image = torch.rand(2, config.channels, 16, 16, generator=gen) * 2 - 1
    mask = (torch.rand(2, 1, 16, 16, generator=gen) > 0.3).float()
    with torch.no_grad():
        full = complete_background(gen_pair, image, torch.ones_like(mask))
        partial = complete_background(gen_pair, image, mask)
    gap = max(float((full - image).abs().max()), float(((partial - image) * mask).abs().max()))
    return gap == 0.0, f"max valid-pixel change {gap:.2e}"


def _numpy_rng(gen: torch.Generator) -> np.random.Generator:
    return np.random.default_rng(int(torch.randint(0, 2 ** 31 - 1, (1,), generator=gen)))


def _codec_round_trip(gen: torch.Generator) -> Tuple[bool, str]:
    rng = _numpy_rng(gen)
    pixels = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
    pixels[0, 0] = (0, 128, 255)
    with tempfile.TemporaryDirectory() as tmp:
        source = Path(tmp) / "source.png"
        Image.fromarray(pixels).save(source)
        decoded = decode_image(source, 24, 3)
        expected = torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)
        decode_gap = float((decoded - expected).abs().max())

        encode_output(decoded, Path(tmp) / "out.png")
        with Image.open(Path(tmp) / "out.png") as img:
            written = np.asarray(img.convert("RGB"), dtype=np.int16)
    level_gap = int(np.abs(written - pixels.astype(np.int16)).max())
    in_range = float(decoded.min()) >= -1.0 and float(decoded.max()) <= 1.0
    known = float(decoded[0, 0, 0]) == -1.0 and float(decoded[2, 0, 0]) == 1.0
    ok = decode_gap <= 1e-6 and level_gap <= 1 and in_range and known
    return ok, f"decode gap {decode_gap:.2e}, round-trip levels {level_gap}, range ok {in_range}"


def _batch_determinism(gen: torch.Generator) -> Tuple[bool, str]:
    rng = _numpy_rng(gen)
    seed = int(rng.integers(0, 2 ** 31 - 1))
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(5):
            Image.fromarray(rng.integers(0, 256, size=(8, 8), dtype=np.uint8)).save(Path(tmp) / f"{i}.png")
        ds = load_domain(tmp, 8, 1)

        def stream() -> List[torch.Tensor]:
            cursor, out = BatchCursor(seed=seed), []
            for _ in range(6):
                batch, cursor = next_batch(ds, 2, cursor)
                out.append(batch)
            return out

        first, second = stream(), stream()
    same = all(torch.equal(a, b) for a, b in zip(first, second))
    orders = [epoch_order(ds, BatchCursor(seed=seed, epoch=e)).tolist() for e in range(2)]
    permutations = all(sorted(o) == list(range(len(ds))) for o in orders)
    return same and permutations, f"identical streams {same}, epochs are permutations {permutations}"


PROPERTIES: List[Tuple[str, Check]] = [
    ("geometry.identity_warp", _identity_warp),
    ("geometry.homography_inverse", _homography_inverse),
    ("geometry.double_inverse", _double_inverse),
    ("geometry.mask_consistency", _mask_consistency),
    ("geometry.round_trip", _round_trip),
    ("geometry.tps_round_trip", _tps_round_trip),
    ("geometry.conservation", _conservation),
    ("losses.identities_and_oracles", _loss_identities),
    ("pipeline.identity_init_cascade", _identity_cascade),
    ("networks.transform_scale_invariance", _transform_scale_invariance),
    ("networks.completion_pass_through", _completion_pass_through),
    ("data_io.codec_round_trip", _codec_round_trip),
    ("data_io.batch_determinism", _batch_determinism),
]


def run_invariants(seed: int = 0) -> InvariantReport:
    """Run every property; a raised domain error counts as a failure."""
    gen = torch.Generator().manual_seed(seed)
    results = []
    for name, check in PROPERTIES:
        try:
            passed, detail = check(gen)
        except GADANError as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        if not passed:
            logger.warning(f"Invariant failed: {name} ({detail})")
        results.append(PropertyResult(name=name, passed=passed, detail=detail))
    return InvariantReport(seed=seed, results=results, passed=all(r.passed for r in results))
