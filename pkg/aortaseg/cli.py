"""aortaseg: Command line interface."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

from . import dilated_net, phantom, pipeline, trainer, volio
from .config import RunConfig
from .errors import NumericalFailureError, TrainingAbortedError
from .metrics import evaluate
from .version import __version__
from .volume import ALL_PLANES, LabelVolume, Plane

logger = logging.getLogger("aortaseg")

EXIT_OK: int = 0
EXIT_USAGE: int = 1
EXIT_DATA: int = 2
EXIT_NUMERICAL: int = 3


class UsageError(Exception):
    """Invalid command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per task."""
    parser = _Parser(prog="aortaseg", description="Dilated CNN aorta segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--verbose", action="store_true", help="log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    cmd = commands.add_parser("phantom", help="generate a phantom dataset")
    cmd.add_argument("--config", help="YAML run configuration")
    cmd.add_argument("--out", help="output directory (default: paths.data)")

    cmd = commands.add_parser("train", help="train a network on a dataset")
    cmd.add_argument("--config", help="YAML run configuration")
    cmd.add_argument("--data", help="dataset directory (default: paths.data)")
    cmd.add_argument("--out", help="checkpoint file (default: paths.model)")

    cmd = commands.add_parser("infer", help="segment a volume")
    cmd.add_argument("--model", required=True, help="checkpoint file")
    cmd.add_argument("--in", dest="input", required=True, help="input volume")
    cmd.add_argument("--out", required=True, help="output label volume")
    cmd.add_argument("--probs", help="directory for per-class probability volumes")
    cmd.add_argument("--config", help="YAML run configuration")
    cmd.add_argument("--fast", action="store_true", help="axial slices only")
    cmd.add_argument("--threads", type=int, help="worker threads")

    cmd = commands.add_parser("eval", help="compare a segmentation with a reference")
    cmd.add_argument("--pred", required=True, help="predicted label volume")
    cmd.add_argument("--ref", required=True, help="reference label volume")
    cmd.add_argument("--out", required=True, help="report file")

    cmd = commands.add_parser("info", help="describe a checkpoint")
    cmd.add_argument("--model", required=True, help="checkpoint file")
    return parser


def _labels(path: str) -> LabelVolume:
    volume = volio.read_volume(path)
    if not isinstance(volume, LabelVolume):
        raise ValueError(f"{path} does not hold labels")
    return volume


def run_phantom(args: argparse.Namespace) -> int:
    """Generate and write a phantom dataset."""
    config = RunConfig(args.config)
    phantoms = phantom.make_dataset(
        config.get("phantom.count"),
        config.phantom_spec(),
        config.get("phantom.seed"),
        spacing=config.phantom_spacing(),
    )
    volio.write_dataset(phantoms, args.out or config.path("data"))
    return EXIT_OK


def run_train(args: argparse.Namespace) -> int:
    """Train on the first cases of a dataset and validate on the next ones."""
    config = RunConfig(args.config)
    logger.info("config: %s", config.as_dict())
    train_config = config.train_config()
    data = Path(args.data) if args.data else config.path("data")
    pairs = volio.read_dataset(data)
    n_train, n_validation, _ = config.split()
    if n_train < 1 or len(pairs) < n_train + n_validation:
        raise ValueError(
            f"{data} holds {len(pairs)} cases, split needs {n_train} + {n_validation}"
        )
    training = pairs[:n_train]
    validation = pairs[n_train : n_train + n_validation]
    out = Path(args.out) if args.out else config.path("model")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".log")
    summary = {
        "seed": train_config.seed,
        "class_count": train_config.class_count,
        "checkpoint": out.name,
    }
    try:
        net, log = trainer.train(training, validation, train_config)
    except TrainingAbortedError as err:
        dilated_net.save_checkpoint(err.network, out)
        err.log.write(log_path)
        err.log.write_summary(os.fspath(config.path("output")), aborted=True, **summary)
        raise
    dilated_net.save_checkpoint(net, out)
    log.write(log_path)
    log.write_summary(os.fspath(config.path("output")), aborted=False, **summary)
    return EXIT_OK


def run_infer(args: argparse.Namespace) -> int:
    """Segment one volume."""
    config = RunConfig(args.config)
    net = dilated_net.load_checkpoint(args.model)
    volume = volio.read_volume(args.input)
    if isinstance(volume, LabelVolume):
        raise ValueError(f"{args.input} holds labels, not intensities")
    fast = args.fast or config.get("inference.fast")
    result = pipeline.segment(
        net,
        volume,
        planes=(Plane.AXIAL,) if fast else ALL_PLANES,
        threads=args.threads,
        slices_per_batch=config.get("inference.slices_per_batch"),
    )
    volio.write_volume(result.labels, args.out)
    if args.probs:
        volio.write_probabilities(result.probabilities, args.probs)
    print(f"segmented {args.input} in {result.seconds:.1f} s")
    return EXIT_OK


def run_eval(args: argparse.Namespace) -> int:
    """Write and print a metrics report."""
    report = evaluate(_labels(args.pred), _labels(args.ref))
    logger.info("metrics report:\n%s", report)
    text = report.to_text()
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def run_info(args: argparse.Namespace) -> int:
    """Print the architecture of a checkpoint."""
    print(dilated_net.describe(dilated_net.load_checkpoint(args.model)))
    return EXIT_OK


COMMANDS = {
    "phantom": run_phantom,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "info": run_info,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line interface.

    Returns
    -------
    int
        0 on success, 1 for usage errors, 2 for data or file errors and 3
        for numerical failures during training.
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"aortaseg: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exit_request:
        return int(exit_request.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    logger.info("version: %s", __version__)
    try:
        return COMMANDS[args.command](args)
    except NumericalFailureError as err:
        logger.error("%s", err)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as err:
        logger.error("%s: %s", args.command, err)
        return EXIT_DATA
