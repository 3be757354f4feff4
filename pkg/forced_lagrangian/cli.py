"""Command-line driver: `flnn gen | train | rollout | eval`"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import torch

from .adapters.filesystem_repository import (
    FilesystemArtifactRepository,
    FilesystemCheckpointRepository,
    FilesystemDatasetRepository,
    read_trajectory_directory,
)
from .config import MODELS, TASKS, ExperimentConfig, load_config, parse_override
from .domain.errors import ConfigError, ForcedLagrangianError
from .services.experiment_service import ExperimentService

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
LOG_LEVEL_ENV = "FLNN_LOG_LEVEL"
THREADS_ENV = "FLNN_NUM_THREADS"

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="output_dir", help="Output directory for all artifacts")
    common.add_argument("--task", choices=TASKS)
    common.add_argument("--model", choices=MODELS)
    common.add_argument("--k", type=int, help="Evaluation step for the extrapolation error")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config field, e.g. training.epochs=500 (repeatable, last wins)",
    )
    common.add_argument("--log-level", default=os.environ.get(LOG_LEVEL_ENV, "INFO"))

    parser = argparse.ArgumentParser(
        prog="flnn", description="Learn forced Lagrangian dynamics from position-only trajectories"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    gen = commands.add_parser("gen", parents=[common], help="Generate train/test datasets")
    gen.add_argument("--csv-dir", help="Directory of trajectory CSVs for the csv-import task")
    commands.add_parser("train", parents=[common], help="Train the configured model")
    rollout = commands.add_parser("rollout", parents=[common], help="Predict the test trajectories")
    rollout.add_argument("--force-off", action="store_true", help="Replace the learned force by zero")
    rollout.add_argument("--both", action="store_true", help="Write force-on and force-off rollouts")
    commands.add_parser("eval", parents=[common], help="Tabulate extrapolation errors")
    return parser


def collect_overrides(args: argparse.Namespace) -> List[Tuple[str, Any]]:
    """`--set` pairs first, then the dedicated flags"""
    overrides = [parse_override(text) for text in args.overrides]
    flags = (
        ("task", args.task),
        ("model", args.model),
        ("seed", args.seed),
        ("output_dir", args.output_dir),
        ("eval.k", args.k),
        ("data.csv_path", getattr(args, "csv_dir", None)),
    )
    overrides.extend((key, value) for key, value in flags if value is not None)
    return overrides


def configure_logging(level: str) -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers = [handler]
    try:
        root.setLevel(level.upper())
    except ValueError as error:
        raise ConfigError(f"unknown log level '{level}'") from error


def configure_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        threads = int(value)
    except ValueError as error:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{value}'") from error
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    torch.set_num_threads(threads)


def create_service(config: ExperimentConfig) -> ExperimentService:
    root = Path(config.output_dir)
    return ExperimentService(
        config,
        FilesystemDatasetRepository(root),
        FilesystemCheckpointRepository(root),
        FilesystemArtifactRepository(root),
    )


def execute(args: argparse.Namespace) -> None:
    config = load_config(args.config, collect_overrides(args))
    configure_threads()
    service = create_service(config)
    logger.info("Running %s for task %s, model %s in %s", args.command, config.task, config.model, config.output_dir)

    if args.command == "gen":
        imported = None
        if config.task == "csv-import" and config.data.csv_path:
            imported = read_trajectory_directory(Path(config.data.csv_path), config.data.h)
        datasets = service.generate(imported)
        print(f"train: {len(datasets['train'])} trajectories, test: {len(datasets['test'])} trajectories")
    elif args.command == "train":
        report = service.train()
        print(f"best epoch {report.best_epoch}, validation loss {report.best_val_loss:.6e}")
    elif args.command == "rollout":
        modes = [True, False] if args.both else [not args.force_off]
        for force_on in modes:
            service.rollout(force_on)
    else:
        print(service.evaluate().to_string(index=False))


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run one command

    Returns:
        0 on success; 1 after writing a JSON error line to stderr
    """
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        execute(args)
    except (ForcedLagrangianError, OSError) as error:
        logger.debug("command failed", exc_info=True)
        report_error(error)
        return 1
    except Exception as error:
        logger.exception("unexpected failure in %s", args.command)
        report_error(error)
        return 1
    return 0


def report_error(error: BaseException) -> None:
    """The machine-readable error line, always last on stderr"""
    print(json.dumps({"error": type(error).__name__, "message": str(error)}), file=sys.stderr)


def main() -> None:
    sys.exit(run())
