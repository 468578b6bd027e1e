"""
Network Models
Localization networks, background-completion / appearance-translation generators,
patch image discriminators and the transformation discriminator.
"""

import logging
from typing import Any, Dict, Iterator, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..schemas.training import TrainConfig, TransformKind
from ..services.geometry import (
    ImageBatch,
    TransformOperator,
    TransformParams,
    ValidityMask,
    identity_params,
    operator_vector,
)
from ..utils.errors import CheckpointError, ConfigError, ShapeMismatch

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1

# Table-style localization trunk: 3x3 conv + 2x2 pool per block
LOCALIZATION_CHANNELS = (16, 32, 64, 128, 128)
LOCALIZATION_HIDDEN = 512


class LocalizationNet(nn.Module):
    """
    Regresses transform parameters from an image and a spatial code.

    The code is concatenated with the flattened last conv block before FC1.
    FC2 starts at zero, so the net predicts the identity transform for every
    input until training moves it; deviations are bounded by a scaled tanh.
    """

    def __init__(
        self,
        kind: TransformKind,
        in_channels: int,
        code_dim: int,
        tps_grid: int = 4,
        input_size: int = 256,
        bound: float = 0.35,
    ):
        super().__init__()
        self.kind = kind
        self.in_channels = in_channels
        self.code_dim = code_dim
        self.input_size = input_size
        self.bound = bound

        layers = []
        prev = in_channels
        for out in LOCALIZATION_CHANNELS:
            layers += [
                nn.Conv2d(prev, out, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2, stride=2),
            ]
            prev = out
        self.features = nn.Sequential(*layers)

        side = input_size // 2 ** len(LOCALIZATION_CHANNELS)
        self.fc1 = nn.Sequential(
            nn.Linear(prev * side * side + code_dim, LOCALIZATION_HIDDEN),
            nn.ReLU(inplace=True),
        )
        self.fc2 = nn.Linear(LOCALIZATION_HIDDEN, kind.parameter_count(tps_grid))
        self.reset_to_identity()
        self.register_buffer("identity", identity_params(kind, tps_grid).theta[0])

    def reset_to_identity(self) -> None:
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, image: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        if image.shape[-2:] != (self.input_size, self.input_size):
            image = F.interpolate(
                image, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False
            )
        h = self.features(image).flatten(1)
        h = self.fc1(torch.cat([h, code], dim=1))
        return self.identity + self.bound * torch.tanh(self.fc2(h))


class ResidualBlock(nn.Module):
    def __init__(self, features: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(features, features, 3),
            nn.InstanceNorm2d(features),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(features, features, 3),
            nn.InstanceNorm2d(features),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """c7s1-k, two stride-2 downs, n residual blocks, two ups, c7s1-C, tanh."""

    def __init__(self, in_channels: int, out_channels: int, base_channels: int = 64, residual_blocks: int = 9):
        super().__init__()
        features = base_channels
        model = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, features, 7),
            nn.InstanceNorm2d(features),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2):
            model += [
                nn.Conv2d(features, features * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(features * 2),
                nn.ReLU(inplace=True),
            ]
            features *= 2
        model += [ResidualBlock(features) for _ in range(residual_blocks)]
        for _ in range(2):
            model += [
                nn.Upsample(scale_factor=2),
                nn.Conv2d(features, features // 2, 3, stride=1, padding=1),
                nn.InstanceNorm2d(features // 2),
                nn.ReLU(inplace=True),
            ]
            features //= 2
        model += [nn.ReflectionPad2d(3), nn.Conv2d(features, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class CompletionGenerator(nn.Module):
    """G_A: fills the invalid region; valid pixels pass through untouched."""

    def __init__(self, channels: int, base_channels: int, residual_blocks: int):
        super().__init__()
        self.net = ResnetGenerator(channels + 1, channels, base_channels, residual_blocks)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        generated = self.net(torch.cat([image, mask], dim=1))
        return image * mask + generated * (1 - mask)


class GeneratorPair(nn.Module):
    """Background completion (G_A) followed by appearance translation (G_B)."""

    def __init__(self, channels: int, base_channels: int, residual_blocks: int):
        super().__init__()
        self.channels = channels
        self.completion = CompletionGenerator(channels, base_channels, residual_blocks)
        self.translation = ResnetGenerator(channels, channels, base_channels, residual_blocks)


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: C64-C128-C256 (stride 2), C512 (stride 1), 1-channel map."""

    def __init__(self, in_channels: int, base_channels: int = 64):
        super().__init__()
        self.in_channels = in_channels

        def block(c_in: int, c_out: int, stride: int, normalize: bool = True) -> list:
            layers = [nn.Conv2d(c_in, c_out, 4, stride=stride, padding=1)]
            if normalize:
                layers.append(nn.InstanceNorm2d(c_out))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            return layers

        c = base_channels
        self.model = nn.Sequential(
            *block(in_channels, c, 2, normalize=False),
            *block(c, c * 2, 2),
            *block(c * 2, c * 4, 2),
            *block(c * 4, c * 8, 1),
            nn.Conv2d(c * 8, 1, 4, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class TransformDiscriminator(nn.Module):
    """Fully connected N -> 64 -> 64 -> 1 on the normalized parameter vector."""

    def __init__(self, parameter_count: int, hidden: int = 64):
        super().__init__()
        self.parameter_count = parameter_count
        self.model = nn.Sequential(
            nn.Linear(parameter_count, hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(hidden, 1),
        )

    def forward(self, vector: torch.Tensor) -> torch.Tensor:
        return self.model(vector).squeeze(-1)


class GADANNetworks(nn.Module):
    """Every learnable component of both cycle directions."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        kind = config.transform_kind
        c = config.channels

        def spatial() -> LocalizationNet:
            return LocalizationNet(
                kind,
                c,
                config.code_dim,
                tps_grid=config.tps_grid,
                input_size=config.localization_size,
                bound=config.transform_bound,
            )

        def generators() -> GeneratorPair:
            return GeneratorPair(c, config.generator_channels, config.residual_blocks)

        self.ln_x = spatial()
        self.ln_y = spatial()
        self.g_x = generators()
        self.g_y = generators()
        self.d_x = PatchDiscriminator(c, config.discriminator_channels)
        self.d_y = PatchDiscriminator(c, config.discriminator_channels)
        self.d_t = TransformDiscriminator(config.parameter_count)

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        """Spatial modules and generators (minimizing side)."""
        for module in (self.ln_x, self.ln_y, self.g_x, self.g_y):
            yield from module.parameters()

    def discriminator_parameters(self) -> Iterator[nn.Parameter]:
        """D_X, D_Y and D_T (maximizing side)."""
        for module in (self.d_x, self.d_y, self.d_t):
            yield from module.parameters()


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def init_networks(config: TrainConfig, seed: Optional[int] = None) -> GADANNetworks:
    """
    Build all networks with reproducible initialization.

    Args:
        config: Run configuration (kind, code_dim, channels, widths)
        seed: Overrides config.seed

    Returns:
        GADANNetworks with N(0, 0.02) conv weights and identity-initialized FC2

    Raises:
        ConfigError: On invalid dimensions
    """
    checks = {
        "code_dim": config.code_dim >= 1,
        "channels": config.channels in (1, 3),
        "generator_channels": config.generator_channels >= 1,
        "discriminator_channels": config.discriminator_channels >= 1,
        "localization_size": config.localization_size >= 32 and config.localization_size % 32 == 0,
        "tps_grid": config.tps_grid >= 2,
    }
    for key, ok in checks.items():
        if not ok:
            raise ConfigError(f"Invalid network dimension {getattr(config, key)!r}", key=key)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        nets = GADANNetworks(config)
        nets.apply(_init_weights)
    logger.debug(f"Initialized networks: {sum(p.numel() for p in nets.parameters())} parameters")
    return nets


def _check_image(image: torch.Tensor, channels: int) -> None:
    if image.dim() != 4 or image.shape[1] != channels:
        raise ShapeMismatch(f"Expected B x {channels} x H x W image, got {tuple(image.shape)}")


def localize(net: LocalizationNet, image: ImageBatch, code: torch.Tensor) -> TransformParams:
    """
    Predict transform parameters for an image batch under a spatial code.

    Raises:
        ShapeMismatch: Wrong image channels or code dimension / batch
    """
    _check_image(image, net.in_channels)
    if code.dim() != 2 or code.shape != (image.shape[0], net.code_dim):
        raise ShapeMismatch(
            f"Code must be {image.shape[0]} x {net.code_dim}, got {tuple(code.shape)}"
        )
    return TransformParams(kind=net.kind, theta=net(image, code))


def _check_generator_input(image: torch.Tensor, channels: int) -> None:
    _check_image(image, channels)
    if image.shape[-1] % 4 or image.shape[-2] % 4:
        raise ShapeMismatch(f"Generator input sides must be multiples of 4, got {tuple(image.shape[-2:])}")


def complete_background(gen: GeneratorPair, image: ImageBatch, mask: ValidityMask) -> ImageBatch:
    """image * mask + G_A(image, mask) * (1 - mask)."""
    _check_generator_input(image, gen.channels)
    if mask.shape != (image.shape[0], 1, *image.shape[-2:]):
        raise ShapeMismatch(f"Mask shape {tuple(mask.shape)} does not align with image {tuple(image.shape)}")
    return gen.completion(image, mask)


def translate_appearance(gen: GeneratorPair, image: ImageBatch) -> ImageBatch:
    """G_B: same-shape style translation bounded in [-1, 1]."""
    _check_generator_input(image, gen.channels)
    return gen.translation(image)


def discriminate_image(d: PatchDiscriminator, image: ImageBatch) -> torch.Tensor:
    """Patch realness logits, B x 1 x h x w."""
    _check_image(image, d.in_channels)
    return d(image)


def discriminate_transform(d: TransformDiscriminator, op: TransformOperator) -> torch.Tensor:
    """Realness logit per batch element from the normalized operator."""
    vector = operator_vector(op)
    if vector.shape[1] != d.parameter_count:
        raise ShapeMismatch(
            f"Transform discriminator expects {d.parameter_count} parameters, got {vector.shape[1]}"
        )
    return d(vector)


def export_weights(nets: GADANNetworks, config: TrainConfig) -> Dict[str, Any]:
    """Versioned container: format version, embedded config, per-net state dicts."""
    return {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": config.model_dump(mode="json"),
        "networks": {name: module.state_dict() for name, module in nets.named_children()},
    }


def import_weights(payload: Dict[str, Any]) -> Tuple[GADANNetworks, TrainConfig]:
    """
    Rebuild networks from export_weights output.

    Raises:
        CheckpointError: Format version mismatch or missing network groups
    """
    version = payload.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported weights format version {version!r} (expected {WEIGHTS_FORMAT_VERSION})"
        )
    config = TrainConfig.model_validate(payload["config"])
    nets = init_networks(config)
    groups = payload.get("networks", {})
    for name, module in nets.named_children():
        if name not in groups:
            raise CheckpointError(f"Checkpoint is missing network group '{name}'")
        module.load_state_dict(groups[name])
    return nets, config
