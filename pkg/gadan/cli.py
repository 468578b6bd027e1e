"""
Command-line interface
Training, 1-to-1 / 1-to-N adaptation, verification suites, toy-data generation
and toy evaluation.

Exit codes: 0 success, 1 validation error (config, empty domain, usage),
2 runtime failure (including non-finite losses and failed verification).
"""

import argparse
import logging
from pathlib import Path
import sys
from typing import Dict, List, NoReturn, Optional, Sequence, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from .config import get_settings
from .models.networks import import_weights
from .schemas.training import TrainConfig
from .services.data_io import decode_image, encode_output, load_domain
from .services.evaluation import DEFAULT_IMAGES, evaluate_toy
from .services.gradcheck import gradient_check
from .services.invariants import run_invariants
from .services.pipeline import (
    adapt,
    adapt_multi,
    load_checkpoint,
    random_transform_params,
    seeded_codes,
    train,
)
from .services.toy_domains import make_toy_domains
from .utils.errors import ConfigError, EmptyDomain, GADANError
from .utils.logging import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
DEFAULT_VIEWS = 10


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the validation code."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _key_lines(text: str) -> Dict[str, int]:
    """1-based line of each key in a dotenv-style file (last occurrence wins)."""
    lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#") or "=" not in stripped:
            continue
        if stripped.startswith("export "):
            stripped = stripped[len("export "):]
        lines[stripped.split("=", 1)[0].strip()] = number
    return lines


def parse_config(path: Union[str, Path]) -> TrainConfig:
    """
    Read a flat key = value run configuration.

    Args:
        path: Configuration file (dotenv syntax, # comments allowed)

    Returns:
        Validated TrainConfig with defaults filled in

    Raises:
        ConfigError: Missing file, unknown key, missing required key or invalid value
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e

    lines = _key_lines(text)
    values = dotenv_values(path)
    for key, value in values.items():
        if key not in TrainConfig.model_fields:
            raise ConfigError(f"Unknown configuration key '{key}'", key=key, line=lines.get(key))
        if value is None:
            raise ConfigError(f"Key '{key}' has no value", key=key, line=lines.get(key))

    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else None
        raise ConfigError(f"Invalid configuration: {error['msg']}", key=key, line=lines.get(key)) from e


def build_parser() -> CliParser:
    parser = CliParser(prog="gadan", description="Geometry-aware domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("train", help="Train the adaptation networks")
    p.add_argument("--config", required=True, help="Run configuration file")
    p.add_argument("--resume", help="Checkpoint to resume from")

    for name, help_text in (("adapt", "One adapted image per input"), ("adapt-multi", "N adapted views per input")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--input", required=True, help="Folder of source-domain images")
        p.add_argument("--out", required=True, help="Output folder")
        p.add_argument("--seed", type=int, default=0, help="Code seed; input i uses seed + i")
        p.add_argument("--geometry-only", action="store_true", help="Skip completion and translation")
        p.add_argument(
            "--random-transform",
            action="store_true",
            help="Baseline: random transforms within the trained bound instead of the spatial module",
        )
        if name == "adapt-multi":
            p.add_argument("--num-views", type=int, default=DEFAULT_VIEWS)

    p = sub.add_parser("check-grads", help="Finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("invariants", help="Run the property suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate-toy", help="Score a checkpoint on the toy domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x-dir", required=True, help="Toy source folder")
    p.add_argument("--y-dir", required=True, help="Toy target folder")
    p.add_argument("--count", type=int, default=DEFAULT_IMAGES, help="Images scored per domain")
    p.add_argument("--num-views", type=int, default=DEFAULT_VIEWS, help="Views for the diversity score")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", help="Metrics log (default: next to the checkpoint)")

    p = sub.add_parser("toy-domains", help="Write synthetic rectangle domains")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    config = parse_config(args.config)
    final = train(config, resume=args.resume)
    logger.info(f"Training finished at step {final.step}")
    return EXIT_OK


def _cmd_adapt(args: argparse.Namespace) -> int:
    views = getattr(args, "num_views", None)
    if views is not None and views < 1:
        raise ConfigError("--num-views must be >= 1", key="num_views")

    nets, config = import_weights(load_checkpoint(args.checkpoint).weights)
    dataset = load_domain(args.input, config.image_size, config.channels)
    out_dir = Path(args.out)
    written = 0
    for i, path in enumerate(dataset.files):
        image = decode_image(path, config.image_size, config.channels).unsqueeze(0)
        if views is None:
            code = seeded_codes(1, config.code_dim, args.seed + i)
            transform = random_transform_params(nets.ln_x, 1, args.seed + i) if args.random_transform else None
            adapted = adapt(nets, image, code, args.geometry_only, transform=transform)
            encode_output(adapted, out_dir / f"{path.stem}.png")
            written += 1
            continue
        multi = adapt_multi(
            nets, image, views, args.seed + i, args.geometry_only, random_transform=args.random_transform
        )
        for k, view in enumerate(multi):
            encode_output(view, out_dir / f"{path.stem}_view{k}.png")
            written += 1
    logger.info(f"Wrote {written} adapted images to {out_dir}")
    return EXIT_OK


def _cmd_check_grads(args: argparse.Namespace) -> int:
    report = gradient_check(args.seed)
    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_invariants(args: argparse.Namespace) -> int:
    report = run_invariants(args.seed)
    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_evaluate_toy(args: argparse.Namespace) -> int:
    report = evaluate_toy(
        args.checkpoint, args.x_dir, args.y_dir, args.count, args.num_views, args.seed, args.metrics
    )
    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_toy_domains(args: argparse.Namespace) -> int:
    if args.count < 1 or args.size < 16:
        raise ConfigError("toy-domains needs --count >= 1 and --size >= 16")
    make_toy_domains(args.out, args.count, args.size, args.seed)
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "adapt": _cmd_adapt,
    "adapt-multi": _cmd_adapt,
    "check-grads": _cmd_check_grads,
    "invariants": _cmd_invariants,
    "evaluate-toy": _cmd_evaluate_toy,
    "toy-domains": _cmd_toy_domains,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, dispatch one subcommand and map errors to exit codes.

    Returns:
        Process exit code
    """
    configure_logging(get_settings().LOG_LEVEL)
    parser = build_parser()
    try:
        args = parser.parse_args(None if argv is None else list(argv))
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_VALIDATION

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, EmptyDomain) as e:
        logger.error(str(e))
        return EXIT_VALIDATION
    except GADANError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> NoReturn:
    sys.exit(run_cli(sys.argv[1:] if argv is None else argv))
