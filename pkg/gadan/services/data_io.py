"""
Data I/O Service
Unpaired image domains on disk: enumeration, deterministic seeded batching,
decoding to [-1, 1] tensors and PNG encoding of outputs.
"""

from dataclasses import dataclass, replace
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from ..utils.errors import DataIoError, EmptyDomain, ShapeMismatch
from .geometry import ImageBatch

logger = logging.getLogger(__name__)

SUPPORTED_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
PathLike = Union[str, Path]


@dataclass(frozen=True)
class DomainDataset:
    """Immutable, lexicographically ordered list of decodable images."""
    root: Path
    files: Tuple[Path, ...]
    size: int
    channels: int

    def __len__(self) -> int:
        return len(self.files)


@dataclass(frozen=True)
class BatchCursor:
    """Position in the seeded epoch stream; threaded through next_batch."""
    seed: int
    epoch: int = 0
    position: int = 0


def _pil_mode(channels: int) -> str:
    if channels == 3:
        return "RGB"
    if channels == 1:
        return "L"
    raise ShapeMismatch(f"Unsupported channel count {channels}")


def decode_image(path: PathLike, size: int, channels: int) -> torch.Tensor:
    """
    Decode one file to a C x size x size tensor in [-1, 1].

    Non-square inputs are resized anisotropically.

    Raises:
        DataIoError: File missing or not decodable
    """
    try:
        with Image.open(path) as img:
            img = img.convert(_pil_mode(channels)).resize((size, size), Image.BILINEAR)
            values = np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError) as e:
        raise DataIoError(f"Cannot decode image {path}: {e}") from e
    if values.ndim == 2:
        values = values[:, :, None]
    return torch.from_numpy(values / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def load_domain(directory: PathLike, size: int, channels: int) -> DomainDataset:
    """
    Enumerate the decodable PNG / JPEG / BMP files of a domain folder.

    Args:
        directory: Domain folder (not searched recursively)
        size: Square target side
        channels: 1 or 3

    Returns:
        DomainDataset with files sorted by name

    Raises:
        DataIoError: Folder missing or unreadable
        EmptyDomain: No decodable image found
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataIoError(f"Domain directory not found: {root}")
    _pil_mode(channels)

    try:
        candidates = sorted(
            (p for p in root.iterdir() if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES),
            key=lambda p: p.name,
        )
    except OSError as e:
        raise DataIoError(f"Cannot list {root}: {e}") from e

    files = []
    for path in candidates:
        try:
            # verify() misses truncated JPEGs; decode the full pixel data
            with Image.open(path) as img:
                img.load()
        except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as e:
            logger.warning(f"Skipping undecodable image {path.name}: {e}")
            continue
        files.append(path)

    if not files:
        raise EmptyDomain(f"No decodable images in {root}")
    logger.info(f"Loaded domain {root} with {len(files)} images")
    return DomainDataset(root=root, files=tuple(files), size=size, channels=channels)


def epoch_order(ds: DomainDataset, cursor: BatchCursor) -> np.ndarray:
    """Permutation of file indices for the cursor's epoch."""
    return np.random.default_rng([cursor.seed, cursor.epoch]).permutation(len(ds))


def next_batch(
    ds: DomainDataset, batch_size: int, cursor: BatchCursor
) -> Tuple[ImageBatch, BatchCursor]:
    """
    Next batch of the seeded epoch stream.

    Pure in (ds, cursor): each epoch is a fresh permutation derived from
    (seed, epoch); the final batch of an epoch may be short, after which the
    stream wraps into the next epoch.
    """
    if batch_size < 1:
        raise ShapeMismatch(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(ds, cursor)
    picked = order[cursor.position:cursor.position + batch_size]
    images = torch.stack([decode_image(ds.files[i], ds.size, ds.channels) for i in picked])

    position = cursor.position + len(picked)
    if position >= len(ds):
        return images, replace(cursor, epoch=cursor.epoch + 1, position=0)
    return images, replace(cursor, position=position)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """C x H x W in [-1, 1] to H x W x C uint8, clamped, rounded half away from zero."""
    values = (image.detach().to("cpu", torch.float64) + 1.0) * 127.5
    values = np.floor(values.clamp(0.0, 255.0).numpy() + 0.5).astype(np.uint8)
    return np.ascontiguousarray(np.transpose(values, (1, 2, 0)))


def encode_output(image: ImageBatch, path: PathLike) -> None:
    """
    Write a single image (1 x C x H x W or C x H x W) as PNG.

    Raises:
        DataIoError: Target not writable
    """
    if image.dim() == 4:
        if image.shape[0] != 1:
            raise ShapeMismatch(f"encode_output writes one image, got batch of {image.shape[0]}")
        image = image[0]
    if image.dim() != 3 or image.shape[0] not in (1, 3):
        raise ShapeMismatch(f"Expected C x H x W with C in (1, 3), got {tuple(image.shape)}")

    pixels = to_uint8(image)
    pil = Image.fromarray(pixels[:, :, 0] if pixels.shape[2] == 1 else pixels)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        pil.save(path, format="PNG")
    except OSError as e:
        raise DataIoError(f"Cannot write {path}: {e}") from e
