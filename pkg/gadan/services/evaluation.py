"""
Toy Evaluation Service
End-to-end scoring of a checkpoint trained on the synthetic rectangle domains.

Adapted X images are scored against domain Y with the tilt and sharpness
oracles of toy_domains; the metrics log, when present, supplies the training
loss trend.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from ..config import get_settings
from ..models.networks import import_weights
from ..schemas.reports import ToyEvaluationReport
from ..schemas.training import TrainConfig
from ..utils.errors import ConfigError, DataIoError
from .data_io import decode_image, load_domain
from .pipeline import Checkpoint, adapt, adapt_multi, load_checkpoint, seeded_codes
from .toy_domains import estimate_tilt, laplacian_energy

logger = logging.getLogger(__name__)

TILT_TOLERANCE = 0.3
DIVERSITY_RATIO = 0.3
LOSS_WINDOW = 200
EARLY_STEP = 200
LATE_STEP = 2000
DEFAULT_IMAGES = 200
DEFAULT_VIEWS = 10


def generator_loss_series(metrics_path: Union[str, Path]) -> Dict[int, float]:
    """
    Total generator loss per step from a metrics log.

    Both directions are summed with the run's adversarial and identity weights.
    Steps replayed after a resume overwrite the earlier values.

    Raises:
        DataIoError: Log missing or malformed
    """
    path = Path(metrics_path)
    series: Dict[int, float] = {}
    weights = None
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                entry = json.loads(line)
                if entry.get("header") == "config":
                    weights = TrainConfig.model_validate(entry["config"]).loss_weights
                    continue
                if weights is None:
                    raise DataIoError(f"{path} has a record before its config header")
                loss = entry["cycle_total"] + weights.lambda_adv * entry["adv_g"] + weights.lambda_idt * entry["idt"]
                step = int(entry["step"])
                if entry["direction"] == "X2Y":
                    series[step] = loss
                else:
                    series[step] = series.get(step, 0.0) + loss
    except OSError as e:
        raise DataIoError(f"Cannot read metrics log {path}: {e}") from e
    except (KeyError, ValueError) as e:
        raise DataIoError(f"Malformed metrics log {path}: {e}") from e
    return series


def moving_average(series: Dict[int, float], after: int, window: int = LOSS_WINDOW) -> Optional[float]:
    """Mean loss over the window steps preceding step `after`; None if any is missing."""
    steps = range(after - window, after)
    if after < window or any(s not in series for s in steps):
        return None
    return float(np.mean([series[s] for s in steps]))


def loss_trend(
    metrics_path: Union[str, Path],
    early: int = EARLY_STEP,
    late: int = LATE_STEP,
    window: int = LOSS_WINDOW,
) -> Tuple[Optional[float], Optional[float]]:
    """(moving average after `early` steps, moving average after `late` steps)."""
    series = generator_loss_series(metrics_path)
    return moving_average(series, early, window), moving_average(series, late, window)


def _tilts_and_energy(images: List[torch.Tensor]) -> Tuple[np.ndarray, float]:
    tilts = np.array([estimate_tilt(image) for image in images])
    energy = float(np.mean([laplacian_energy(image) for image in images]))
    return tilts, energy


def evaluate_toy(
    checkpoint: Union[str, Path, Checkpoint],
    x_dir: Union[str, Path],
    y_dir: Union[str, Path],
    count: int = DEFAULT_IMAGES,
    views: int = DEFAULT_VIEWS,
    seed: int = 0,
    metrics_path: Optional[Union[str, Path]] = None,
) -> ToyEvaluationReport:
    """
    Score a toy-domain checkpoint.

    Args:
        checkpoint: Checkpoint object or file
        x_dir: Source rectangles folder
        y_dir: Tilted, blurred target folder
        count: Number of X (and Y) images scored, first by file name
        views: Views of the first X image used for the diversity score
        seed: Code seed; X image i is adapted with a fresh code from seed + i
        metrics_path: Metrics log for the loss trend; defaults to the log next
            to a checkpoint file

    Returns:
        ToyEvaluationReport; passed requires every evaluated check
    """
    if count < 1:
        raise ConfigError(f"Need at least one image to score, got {count}", key="count")
    if isinstance(checkpoint, Checkpoint):
        model = checkpoint
    else:
        model = load_checkpoint(checkpoint)
        if metrics_path is None:
            candidate = Path(checkpoint).parent / get_settings().METRICS_FILENAME
            metrics_path = candidate if candidate.is_file() else None

    nets, config = import_weights(model.weights)
    nets = nets.to(torch.device(get_settings().DEVICE))
    ds_x = load_domain(x_dir, config.image_size, config.channels)
    ds_y = load_domain(y_dir, config.image_size, config.channels)

    x_images = [decode_image(p, config.image_size, config.channels) for p in ds_x.files[:count]]
    y_images = [decode_image(p, config.image_size, config.channels) for p in ds_y.files[:count]]
    adapted = [
        adapt(nets, image.unsqueeze(0), seeded_codes(1, config.code_dim, seed + i))[0].cpu()
        for i, image in enumerate(x_images)
    ]

    _, energy_x = _tilts_and_energy(x_images)
    tilts_y, energy_y = _tilts_and_energy(y_images)
    tilts_adapted, energy_adapted = _tilts_and_energy(adapted)

    mean_abs_y = float(np.abs(tilts_y).mean())
    mean_abs_adapted = float(np.abs(tilts_adapted).mean())
    rel_error = abs(mean_abs_adapted - mean_abs_y) / max(mean_abs_y, 1e-12)

    view_images = adapt_multi(nets, x_images[0].unsqueeze(0), views, seed)
    view_std = float(np.std([estimate_tilt(v[0].cpu()) for v in view_images]))
    y_std = float(np.std(tilts_y))

    loss_early = loss_late = None
    loss_passed = None
    if metrics_path is not None:
        loss_early, loss_late = loss_trend(metrics_path)
        if loss_early is not None and loss_late is not None:
            loss_passed = loss_late < loss_early
    if loss_passed is None:
        logger.warning(f"No loss trend: the metrics log does not cover {LATE_STEP} steps")

    tilt_passed = rel_error <= TILT_TOLERANCE
    sharpness_passed = abs(energy_adapted - energy_y) < abs(energy_x - energy_y)
    diversity_passed = view_std >= DIVERSITY_RATIO * y_std

    report = ToyEvaluationReport(
        checkpoint_step=model.step,
        images=len(adapted),
        views=views,
        mean_abs_tilt_adapted=mean_abs_adapted,
        mean_abs_tilt_y=mean_abs_y,
        tilt_relative_error=rel_error,
        tilt_passed=tilt_passed,
        laplacian_x=energy_x,
        laplacian_y=energy_y,
        laplacian_adapted=energy_adapted,
        sharpness_passed=sharpness_passed,
        view_tilt_std=view_std,
        y_tilt_std=y_std,
        diversity_passed=diversity_passed,
        loss_early=loss_early,
        loss_late=loss_late,
        loss_passed=loss_passed,
        passed=tilt_passed and sharpness_passed and diversity_passed and loss_passed is not False,
    )
    logger.info(
        f"Toy evaluation at step {model.step}: tilt error {rel_error:.3f}, "
        f"sharpness {energy_adapted:.4f} (X {energy_x:.4f}, Y {energy_y:.4f}), "
        f"view std {view_std:.2f} vs Y {y_std:.2f}"
    )
    return report
