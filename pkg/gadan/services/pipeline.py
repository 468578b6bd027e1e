"""
Pipeline Service
Wires the full adaptation cycle, runs adversarial training with checkpointing,
and performs 1-to-1 / 1-to-N adaptation inference.

Role naming follows the X -> Y direction: S_X = ln_x, G_X = g_x, S_Y = ln_y,
G_Y = g_y, D_Y judges adapted X, D_X judges adapted Y. The Y -> X direction
swaps every X-role module with its Y-role counterpart.
"""

import copy
from dataclasses import asdict, dataclass
import logging
from pathlib import Path
import pickle
from typing import Any, Dict, List, Optional, Tuple, Union

import torch

from ..config import get_settings
from ..models.networks import (
    GADANNetworks,
    GeneratorPair,
    LocalizationNet,
    complete_background,
    discriminate_image,
    discriminate_transform,
    export_weights,
    import_weights,
    init_networks,
    localize,
    translate_appearance,
)
from ..schemas.training import (
    CycleDirection,
    CycleLossReport,
    MetricsHeader,
    MetricsRecord,
    TrainConfig,
)
from ..utils.errors import (
    CheckpointError,
    ConfigError,
    DataIoError,
    KindMismatch,
    NonFiniteLoss,
    NonFiniteTensor,
    ShapeMismatch,
    SingularTransform,
)
from .data_io import BatchCursor, load_domain, next_batch
from .geometry import (
    ImageBatch,
    TransformOperator,
    TransformParams,
    ValidityMask,
    build_operator,
    invert_operator,
    warp,
    warp_mask,
)
from .losses import AdversarialSide, adversarial_losses, cycle_loss, identity_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# Fields that must agree between a checkpoint and the config resuming it
NETWORK_KEYS = (
    "transform_kind",
    "tps_grid",
    "transform_bound",
    "channels",
    "localization_size",
    "code_dim",
    "generator_channels",
    "residual_blocks",
    "discriminator_channels",
)

X2Y = CycleDirection.X2Y
Y2X = CycleDirection.Y2X


@dataclass
class CycleBundle:
    """Every intermediate of one cycle direction."""
    x: ImageBatch
    code: torch.Tensor
    H_XY: TransformOperator
    transformed: ImageBatch
    m: ValidityMask
    adapted: ImageBatch
    H_XY_inv: TransformOperator
    x_rec_inv: ImageBatch
    H_SY: TransformOperator
    x_rec_pred: ImageBatch
    m_roundtrip: ValidityMask


def _roles(
    nets: GADANNetworks, direction: CycleDirection
) -> Tuple[LocalizationNet, GeneratorPair, LocalizationNet, GeneratorPair]:
    """(forward spatial, forward generators, backward spatial, backward generators)."""
    if direction is X2Y:
        return nets.ln_x, nets.g_x, nets.ln_y, nets.g_y
    return nets.ln_y, nets.g_y, nets.ln_x, nets.g_x


def _generate(gen: GeneratorPair, image: ImageBatch, mask: ValidityMask) -> ImageBatch:
    return translate_appearance(gen, complete_background(gen, image, mask))


def run_cycle(
    nets: GADANNetworks,
    x: ImageBatch,
    code: torch.Tensor,
    direction: CycleDirection = X2Y,
) -> CycleBundle:
    """
    Forward adaptation followed by both recovery paths.

    Steps: localize, build H_XY, warp, complete, translate; then the inverse
    path through H_XY^-1 and G_Y, the predicted path through S_Y (same code)
    and G_Y, and the round-trip warp of the validity mask.

    Raises:
        ShapeMismatch: The two spatial modules take codes of different sizes
        SingularTransform: A predicted or inverted transform is singular
    """
    ln_fwd, g_fwd, ln_back, g_back = _roles(nets, direction)
    if ln_fwd.code_dim != ln_back.code_dim:
        raise ShapeMismatch(
            f"Spatial modules disagree on code size: {ln_fwd.code_dim} vs {ln_back.code_dim}"
        )

    h_xy = build_operator(localize(ln_fwd, x, code))
    transformed, m = warp(x, h_xy)
    adapted = _generate(g_fwd, transformed, m)

    h_inv = invert_operator(h_xy)
    back, m_back = warp(adapted, h_inv)
    x_rec_inv = _generate(g_back, back, m_back)

    # S_Y sees the very code S_X saw
    h_sy = build_operator(localize(ln_back, adapted, code))
    pred, m_pred = warp(adapted, h_sy)
    x_rec_pred = _generate(g_back, pred, m_pred)

    return CycleBundle(
        x=x,
        code=code,
        H_XY=h_xy,
        transformed=transformed,
        m=m,
        adapted=adapted,
        H_XY_inv=h_inv,
        x_rec_inv=x_rec_inv,
        H_SY=h_sy,
        x_rec_pred=x_rec_pred,
        m_roundtrip=warp_mask(m, h_inv),
    )


class ReplayBuffer:
    """
    Pool of past generated images shown to a discriminator.

    Once full, each incoming image is either passed through or swapped with a
    random stored one (probability 0.5). A size of 0 disables the pool.
    """

    def __init__(self, max_size: int = 0):
        self.max_size = max_size
        self.data: List[torch.Tensor] = []

    def push_and_pop(self, images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        images = images.detach()
        if self.max_size == 0:
            return images
        out = []
        for element in images:
            if len(self.data) < self.max_size:
                self.data.append(element.clone())
                out.append(element)
            elif torch.rand(1, generator=generator).item() > 0.5:
                i = int(torch.randint(self.max_size, (1,), generator=generator))
                out.append(self.data[i].clone())
                self.data[i] = element.clone()
            else:
                out.append(element)
        return torch.stack(out)

    def state(self) -> List[torch.Tensor]:
        return [t.detach().cpu().clone() for t in self.data]

    def load(self, data: List[torch.Tensor], device: torch.device) -> None:
        self.data = [t.to(device) for t in data]


@dataclass
class Checkpoint:
    """Complete training state; weights is the export_weights container."""
    step: int
    weights: Dict[str, Any]
    optimizers: Dict[str, Any]
    rng: Dict[str, torch.Tensor]
    cursors: Dict[str, Dict[str, int]]
    replay: Dict[str, List[torch.Tensor]]
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.model_validate(self.weights["config"])

    def to_payload(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "step": self.step,
            "weights": self.weights,
            "optimizers": self.optimizers,
            "rng": self.rng,
            "cursors": self.cursors,
            "replay": self.replay,
        }


def checkpoint_path(directory: Union[str, Path], step: int) -> Path:
    return Path(directory) / f"{get_settings().CHECKPOINT_PREFIX}_{step:07d}.pt"


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """
    Write a checkpoint with torch.save.

    Raises:
        DataIoError: Target not writable
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(checkpoint.to_payload(), path)
    except OSError as e:
        raise DataIoError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved: {path} (step {checkpoint.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        DataIoError: File missing or unreadable
        CheckpointError: Wrong format version or missing fields
    """
    path = Path(path)
    if not path.is_file():
        raise DataIoError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} does not hold a checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint format version {version!r} (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    missing = [k for k in ("step", "weights", "optimizers", "rng", "cursors", "replay") if k not in payload]
    if missing:
        raise CheckpointError(f"Checkpoint {path} is missing {', '.join(missing)}")
    return Checkpoint(**payload)


def _check_finite(tensors: Dict[str, torch.Tensor]) -> None:
    for name, value in tensors.items():
        if not torch.isfinite(value.detach()).all():
            raise NonFiniteLoss(name)


class GADANTrainer:
    """
    Owns the networks, both optimizers, the code generator, replay pools and
    data cursors of one training run.
    """

    def __init__(self, config: TrainConfig, nets: Optional[GADANNetworks] = None):
        settings = get_settings()
        self.config = config
        self.weights = config.loss_weights
        self.device = torch.device(settings.DEVICE)
        self.nets = (nets if nets is not None else init_networks(config)).to(self.device)

        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.nets.generator_parameters(), lr=config.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.nets.discriminator_parameters(), lr=config.lr_d, betas=betas)

        self.code_generator = torch.Generator().manual_seed(config.seed)
        self.pools = {
            X2Y: ReplayBuffer(config.replay_buffer_size),
            Y2X: ReplayBuffer(config.replay_buffer_size),
        }
        self.cursors = {
            "x": BatchCursor(seed=config.seed),
            "y": BatchCursor(seed=config.seed + 1),
        }
        self.step = 0

    def sample_codes(self, batch_size: int) -> torch.Tensor:
        """One standard-normal spatial code per example."""
        codes = torch.randn(batch_size, self.config.code_dim, generator=self.code_generator)
        return codes.to(self.device)

    def _cycle_with_skips(
        self, images: torch.Tensor, codes: torch.Tensor, direction: CycleDirection
    ) -> Optional[CycleBundle]:
        """run_cycle, dropping examples whose transforms are singular."""
        while True:
            try:
                return run_cycle(self.nets, images, codes, direction)
            except SingularTransform as e:
                if not e.indices:
                    raise
                bad = set(e.indices)
                keep = [i for i in range(images.shape[0]) if i not in bad]
                logger.warning(f"{direction.value}: skipping singular examples {sorted(bad)}")
                if not keep:
                    return None
                images, codes = images[keep], codes[keep]

    def train_step(
        self, batch_x: ImageBatch, batch_y: ImageBatch, step: int
    ) -> Dict[CycleDirection, CycleLossReport]:
        """
        One generator/spatial update followed by one discriminator update.

        Returns:
            CycleLossReport per direction; empty when a whole batch was singular

        Raises:
            NonFiniteLoss: Naming the first non-finite loss term
        """
        w = self.weights
        nets = self.nets
        x = batch_x.to(self.device)
        y = batch_y.to(self.device)
        _check_finite({"batch_x": x, "batch_y": y})

        try:
            xy = self._cycle_with_skips(x, self.sample_codes(x.shape[0]), X2Y)
            yx = self._cycle_with_skips(y, self.sample_codes(y.shape[0]), Y2X)
        except NonFiniteTensor as e:
            if isinstance(e, NonFiniteLoss):
                raise
            raise NonFiniteLoss(f"cycle.{e.name}") from e
        if xy is None or yx is None:
            logger.warning(f"Step {step}: every example of a batch was singular, update skipped")
            return {}
        bundles = {X2Y: xy, Y2X: yx}
        d_image = {X2Y: nets.d_y, Y2X: nets.d_x}
        real = {X2Y: y, Y2X: x}
        other = {X2Y: yx, Y2X: xy}

        # Spatial modules + generators
        terms, adv_g, idt = {}, {}, {}
        for d, b in bundles.items():
            terms[d] = cycle_loss(b, w, self.config.disentangled_cycle)
            adv_g[d] = adversarial_losses(
                None,
                discriminate_image(d_image[d], b.adapted),
                None,
                discriminate_transform(nets.d_t, b.H_XY),
                AdversarialSide.GENERATOR,
            )
            idt[d] = identity_loss(b.adapted, b.transformed, b.m)

        loss_g = sum(w.lambda_adv * adv_g[d] + terms[d].total + w.lambda_idt * idt[d] for d in bundles)
        checks = {}
        for d in bundles:
            checks.update({
                f"{d.value}.acl": terms[d].acl,
                f"{d.value}.scl": terms[d].scl,
                f"{d.value}.rml": terms[d].rml,
                f"{d.value}.adv_g": adv_g[d],
                f"{d.value}.idt": idt[d],
            })
        checks["loss_g"] = loss_g
        _check_finite(checks)

        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()

        # Discriminators: D_T sees the other direction's inverse as real
        adv_d = {}
        for d, b in bundles.items():
            fake = self.pools[d].push_and_pop(b.adapted, self.code_generator)
            adv_d[d] = adversarial_losses(
                discriminate_image(d_image[d], real[d]),
                discriminate_image(d_image[d], fake),
                discriminate_transform(nets.d_t, other[d].H_XY_inv.detach()),
                discriminate_transform(nets.d_t, b.H_XY.detach()),
                AdversarialSide.DISCRIMINATOR,
            )
        loss_d = adv_d[X2Y] + adv_d[Y2X]
        _check_finite({**{f"{d.value}.adv_d": v for d, v in adv_d.items()}, "loss_d": loss_d})

        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()

        return {
            d: CycleLossReport(
                acl=terms[d].acl.item(),
                scl=terms[d].scl.item(),
                rml=terms[d].rml.item(),
                cycle_total=terms[d].total.item(),
                adv_g=adv_g[d].item(),
                adv_d=adv_d[d].item(),
                idt=idt[d].item(),
            )
            for d in bundles
        }

    def checkpoint(self) -> Checkpoint:
        """Snapshot of the full training state (copied, safe to keep)."""
        return Checkpoint(
            step=self.step,
            weights=copy.deepcopy(export_weights(self.nets, self.config)),
            optimizers={
                "generator": copy.deepcopy(self.opt_g.state_dict()),
                "discriminator": copy.deepcopy(self.opt_d.state_dict()),
            },
            rng={"torch": torch.get_rng_state(), "codes": self.code_generator.get_state()},
            cursors={name: asdict(cursor) for name, cursor in self.cursors.items()},
            replay={d.value: pool.state() for d, pool in self.pools.items()},
        )

    @classmethod
    def from_checkpoint(
        cls, checkpoint: Checkpoint, config: Optional[TrainConfig] = None
    ) -> "GADANTrainer":
        """
        Restore a trainer. A supplied config may change run settings (steps,
        cadence, folders) but not the network definition.

        Raises:
            CheckpointError: Network definition differs from the checkpoint
        """
        nets, saved = import_weights(checkpoint.weights)
        if config is not None:
            changed = [k for k in NETWORK_KEYS if getattr(config, k) != getattr(saved, k)]
            if changed:
                raise CheckpointError(f"Config disagrees with checkpoint on {', '.join(changed)}")
        trainer = cls(config or saved, nets)
        trainer.opt_g.load_state_dict(checkpoint.optimizers["generator"])
        trainer.opt_d.load_state_dict(checkpoint.optimizers["discriminator"])
        torch.set_rng_state(checkpoint.rng["torch"])
        trainer.code_generator.set_state(checkpoint.rng["codes"])
        trainer.cursors = {name: BatchCursor(**c) for name, c in checkpoint.cursors.items()}
        for d, pool in trainer.pools.items():
            pool.load(checkpoint.replay.get(d.value, []), trainer.device)
        trainer.step = checkpoint.step
        return trainer


def train(config: TrainConfig, resume: Optional[Union[str, Path]] = None) -> Checkpoint:
    """
    Run training to config.steps, writing checkpoints and the metrics log.

    Checkpoints land in config.checkpoint_dir at every multiple of
    checkpoint_every and at the final step (step 0 when steps = 0). The metrics
    log starts with a header echoing the config, then one record per
    direction per step; a resumed run appends a new header.

    Args:
        config: Validated run configuration
        resume: Optional checkpoint path to continue from

    Returns:
        Final checkpoint

    Raises:
        EmptyDomain / DataIoError: Domain folders unusable
        CheckpointError: Resume checkpoint invalid
        NonFiniteLoss: Training diverged
    """
    settings = get_settings()
    torch.use_deterministic_algorithms(True, warn_only=True)

    ds_x = load_domain(config.domain_x_dir, config.image_size, config.channels)
    ds_y = load_domain(config.domain_y_dir, config.image_size, config.channels)

    if resume is not None:
        trainer = GADANTrainer.from_checkpoint(load_checkpoint(resume), config)
        resumed_from: Optional[int] = trainer.step
        logger.info(f"Resuming from {resume} at step {trainer.step}")
    else:
        trainer = GADANTrainer(config)
        resumed_from = None

    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / settings.METRICS_FILENAME
    header = MetricsHeader(resumed_from=resumed_from, config=config.model_dump(mode="json"))
    logger.info(f"Training {config.transform_kind.value} for {config.steps} steps: {header.config}")

    last_saved = -1
    final = None
    with open(metrics_path, "a" if resume is not None else "w", encoding="utf-8") as metrics:
        metrics.write(header.model_dump_json() + "\n")

        while trainer.step < config.steps:
            step = trainer.step
            batch_x, trainer.cursors["x"] = next_batch(ds_x, config.batch_size, trainer.cursors["x"])
            batch_y, trainer.cursors["y"] = next_batch(ds_y, config.batch_size, trainer.cursors["y"])
            reports = trainer.train_step(batch_x, batch_y, step)

            for direction, report in reports.items():
                record = MetricsRecord(step=step, direction=direction, **report.model_dump())
                metrics.write(record.model_dump_json() + "\n")
            metrics.flush()
            trainer.step = step + 1

            if reports and trainer.step % config.log_every == 0:
                xy = reports[X2Y]
                logger.info(
                    f"Step {trainer.step}/{config.steps}: cycle {xy.cycle_total:.4f} "
                    f"adv_g {xy.adv_g:.4f} adv_d {xy.adv_d:.4f} idt {xy.idt:.4f}"
                )
            if trainer.step % config.checkpoint_every == 0 or trainer.step == config.steps:
                final = trainer.checkpoint()
                save_checkpoint(final, checkpoint_path(out_dir, trainer.step))
                last_saved = trainer.step

    if last_saved != trainer.step:
        final = trainer.checkpoint()
        save_checkpoint(final, checkpoint_path(out_dir, trainer.step))
    return final


Adaptable = Union[Checkpoint, GADANNetworks]


def _networks(model: Adaptable) -> GADANNetworks:
    if isinstance(model, Checkpoint):
        nets, _ = import_weights(model.weights)
        return nets.to(torch.device(get_settings().DEVICE))
    return model


def seeded_codes(count: int, code_dim: int, seed: int) -> torch.Tensor:
    """count x code_dim standard-normal codes from a generator seeded with seed."""
    return torch.randn(count, code_dim, generator=torch.Generator().manual_seed(seed))


def random_transform_params(ln: LocalizationNet, count: int, seed: int) -> TransformParams:
    """
    Baseline transforms drawn uniformly within the spatial module's range.

    theta = identity + bound * U(-1, 1) per entry, from a generator seeded with
    seed; the image is never looked at.
    """
    identity = ln.identity.detach().cpu()
    noise = torch.rand(count, identity.numel(), generator=torch.Generator().manual_seed(seed), dtype=identity.dtype)
    theta = identity + ln.bound * (2 * noise - 1)
    return TransformParams(kind=ln.kind, theta=theta.to(ln.identity.device))


def adapt(
    model: Adaptable,
    image: ImageBatch,
    code: torch.Tensor,
    geometry_only: bool = False,
    direction: CycleDirection = X2Y,
    transform: Optional[TransformParams] = None,
) -> ImageBatch:
    """
    Forward adaptation only (localize, warp, complete, translate).

    Args:
        model: Checkpoint or already-built networks
        image: B x C x H x W batch in [-1, 1]
        code: B x d_z codes, or 1 x d_z shared by the whole batch
        geometry_only: Stop after the spatial module and return the warped image
        transform: Parameters used in place of the spatial module's prediction
            (B rows or one shared row); code is then ignored

    Raises:
        SingularTransform: Predicted transform is singular
    """
    nets = _networks(model)
    ln, gen, _, _ = _roles(nets, direction)
    device = next(nets.parameters()).device
    image = image.to(device)
    code = code.to(device)
    if code.dim() == 2 and code.shape[0] == 1 and image.shape[0] > 1:
        code = code.expand(image.shape[0], -1)

    with torch.no_grad():
        if transform is None:
            params = localize(ln, image, code)
        else:
            if transform.kind is not ln.kind:
                raise KindMismatch(f"Expected {ln.kind.value} parameters, got {transform.kind.value}")
            theta = transform.theta.to(device=device, dtype=image.dtype)
            if theta.shape[0] == 1 and image.shape[0] > 1:
                theta = theta.expand(image.shape[0], -1)
            params = TransformParams(kind=transform.kind, theta=theta)
        transformed, m = warp(image, build_operator(params))
        if geometry_only:
            return transformed
        return _generate(gen, transformed, m)


def adapt_multi(
    model: Adaptable,
    image: ImageBatch,
    n: int = 10,
    seed: int = 0,
    geometry_only: bool = False,
    direction: CycleDirection = X2Y,
    random_transform: bool = False,
) -> List[ImageBatch]:
    """
    n adapted versions of image, one per seeded spatial code.

    With random_transform, view k uses row k of random_transform_params(n, seed)
    instead of the learned spatial module.
    """
    if n < 1:
        raise ConfigError(f"Number of views must be >= 1, got {n}", key="num_views")
    nets = _networks(model)
    ln = _roles(nets, direction)[0]
    codes = seeded_codes(n, ln.code_dim, seed)
    if not random_transform:
        return [adapt(nets, image, codes[k:k + 1], geometry_only, direction) for k in range(n)]
    params = random_transform_params(ln, n, seed)
    return [
        adapt(
            nets,
            image,
            codes[k:k + 1],
            geometry_only,
            direction,
            transform=TransformParams(kind=params.kind, theta=params.theta[k:k + 1]),
        )
        for k in range(n)
    ]
