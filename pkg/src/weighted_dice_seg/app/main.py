# pylint: disable=too-many-locals, broad-exception-caught
"""
Command-line entry point binding phantom generation, training, inference and evaluation.

Every subcommand takes the common flags (seed, network shape, optimisation settings and
output directory). Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails.
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import orjson

from weighted_dice_seg.app.datastore import DataStore
from weighted_dice_seg.app.inference import segment_volume
from weighted_dice_seg.app.phantom import PhantomSpec, generate_dataset, split_indices
from weighted_dice_seg.app.trainer import (
    TrainConfig,
    TrainingDivergedError,
    train,
    write_curve_csv,
)
from weighted_dice_seg.configuration.config import (
    DATASET_ROOT,
    DEFAULT_BASE_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_ITERATIONS,
    DEFAULT_LEARNING_RATES,
    DEFAULT_LEVELS,
    DEFAULT_PATCH,
    DEFAULT_SEED,
    DEFAULT_VALIDATION_INTERVAL,
    set_verbosity,
)
from weighted_dice_seg.core.dice import (
    WeightingScheme,
    best_runs,
    class_counts,
    class_weights,
    dice_report,
    mean_dice_report,
    report_table,
)
from weighted_dice_seg.core.unet3d import UNetConfig, load_checkpoint, save_checkpoint
from weighted_dice_seg.core.voxelgrid import read_volume, write_volume
from weighted_dice_seg.utilities.helper_functions import (
    derive_seed,
    parse_float_list,
    parse_shape,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

SCHEMES = [scheme.value for scheme in WeightingScheme]


class UsageError(Exception):
    """Flags were parseable but do not make sense together."""


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="Base random seed.")
    common.add_argument(
        "--patch",
        type=parse_shape,
        default=(DEFAULT_PATCH,) * 3,
        help='Patch extents, "32" or "32,32,16".',
    )
    common.add_argument("--levels", type=int, default=DEFAULT_LEVELS)
    common.add_argument("--base-channels", type=int, default=DEFAULT_BASE_CHANNELS)
    common.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    common.add_argument(
        "--lr",
        type=parse_float_list,
        default=None,
        help="Learning rate, or a comma separated list for grid.",
    )
    common.add_argument(
        "--scheme",
        choices=SCHEMES,
        action="append",
        default=None,
        help="Class weighting; repeat for grid.",
    )
    common.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    common.add_argument("--out-dir", type=Path, default=Path("."))
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG."
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    """The full command-line parser."""
    common = _common_flags()
    parser = _Parser(
        prog="weighted-dice-seg",
        description="Weighted soft-Dice volumetric segmentation on synthetic phantoms.",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    phantom = commands.add_parser(
        "phantom-gen", parents=[common], help="Generate a synthetic multi-organ dataset."
    )
    phantom.add_argument("--patients", type=int, default=20)
    phantom.add_argument("--train-fraction", type=float, default=0.9)
    phantom.add_argument(
        "--scale", type=int, default=1, help="Render the anatomy this many times finer."
    )
    phantom.add_argument("--noise-sigma", type=float, default=None)
    phantom.add_argument("--downsample-factor", type=int, default=1)
    phantom.set_defaults(handler=cmd_phantom_gen)

    weights = commands.add_parser(
        "weights", parents=[common], help="Print class weights of a dataset's training split."
    )
    weights.add_argument("dataset", type=Path, nargs="?", default=Path(DATASET_ROOT))
    weights.add_argument("--output", type=Path, default=None, help="Write JSON here too.")
    weights.set_defaults(handler=cmd_weights)

    training = commands.add_parser("train", parents=[common], help="Train one network.")
    training.add_argument("dataset", type=Path, nargs="?", default=Path(DATASET_ROOT))
    training.add_argument("--validation-interval", type=int, default=DEFAULT_VALIDATION_INTERVAL)
    training.add_argument("--checkpoint-interval", type=int, default=0)
    training.add_argument(
        "--allow-repeat-patients",
        action="store_true",
        help="Let one batch hold several patches of the same patient.",
    )
    training.set_defaults(handler=cmd_train)

    predict = commands.add_parser(
        "predict", parents=[common], help="Segment a volume with a trained checkpoint."
    )
    predict.add_argument("checkpoint", type=Path)
    predict.add_argument("volume", type=Path)
    predict.add_argument("--stride", type=parse_shape, default=None)
    predict.add_argument("--workers", type=int, default=1)
    predict.set_defaults(handler=cmd_predict)

    evaluate = commands.add_parser(
        "evaluate", parents=[common], help="Per-class Dice of a segmentation."
    )
    evaluate.add_argument("prediction", type=Path)
    evaluate.add_argument("truth", type=Path)
    evaluate.add_argument(
        "--class-names", default=None, help="Comma separated names, background first."
    )
    evaluate.set_defaults(handler=cmd_evaluate)

    grid = commands.add_parser(
        "grid", parents=[common], help="Train and evaluate every scheme x learning rate."
    )
    grid.add_argument("dataset", type=Path, nargs="?", default=Path(DATASET_ROOT))
    grid.add_argument("--validation-interval", type=int, default=DEFAULT_VALIDATION_INTERVAL)
    grid.add_argument("--stride", type=parse_shape, default=None)
    grid.add_argument("--parallel", type=int, default=1, help="Runs trained concurrently.")
    grid.add_argument("--allow-repeat-patients", action="store_true")
    grid.set_defaults(handler=cmd_grid)
    return parser


def _single_scheme(args) -> WeightingScheme:
    if args.scheme and len(args.scheme) > 1:
        raise UsageError("Only one --scheme is accepted by this command.")
    return WeightingScheme(args.scheme[0] if args.scheme else WeightingScheme.UNIFORM)


def _single_rate(args) -> float:
    if args.lr and len(args.lr) > 1:
        raise UsageError("Only one --lr is accepted by this command.")
    return args.lr[0] if args.lr else DEFAULT_LEARNING_RATES[0]


def _open_dataset(path: Path) -> DataStore:
    store = DataStore(path)
    if not store.num_classes or not store.split("train"):
        raise FileNotFoundError(f"No phantom dataset with training patients in {path}.")
    return store


def _unet_config(args, num_classes: int) -> UNetConfig:
    try:
        return UNetConfig(num_classes, 1, args.levels, args.base_channels, args.patch)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _train_config(args, scheme, learning_rate, seed, checkpoint_interval=0) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate,
            iterations=args.iterations,
            batch_size=args.batch_size,
            scheme=scheme,
            seed=seed,
            validation_interval=args.validation_interval,
            distinct_patients=not args.allow_repeat_patients,
            checkpoint_interval=checkpoint_interval,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e


def run_label(scheme, learning_rate: float) -> str:
    """Column and file label of one grid run, e.g. "uniform_lr0.001"."""
    return f"{scheme}_lr{learning_rate:g}"


def cmd_phantom_gen(args) -> int:
    """Generate phantoms and save them as a dataset directory."""
    overrides = {"seed": args.seed}
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    try:
        spec = PhantomSpec.from_config(**overrides)
        if args.scale != 1:
            spec = spec.scaled(args.scale)
        split_indices(args.patients, args.train_fraction, spec.seed)
        if args.downsample_factor < 1:
            raise ValueError("--downsample-factor must be at least 1.")
    except ValueError as e:
        raise UsageError(str(e)) from e
    dataset = generate_dataset(
        spec, args.patients, args.train_fraction, downsample_factor=args.downsample_factor
    )
    DataStore.from_dataset(dataset, args.out_dir).save()
    print(
        f"Wrote {len(dataset.train)} train and {len(dataset.test)} test patients "
        f"({spec.num_classes} classes) to {args.out_dir}"
    )
    return EXIT_OK


def cmd_weights(args) -> int:
    """Print the class counts and weights of the training split as JSON."""
    store = _open_dataset(args.dataset)
    scheme = _single_scheme(args)
    counts = class_counts([record.labels for record in store.split("train")], store.num_classes)
    weights = class_weights(counts, scheme)
    document = weights.as_dict(store.class_names)
    document["counts"] = dict(zip(store.class_names, counts.per_class.tolist()))
    document["total"] = counts.total
    payload = orjson.dumps(document, option=orjson.OPT_INDENT_2)
    if args.output is not None:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_bytes(payload)
    print(payload.decode("utf-8"))
    return EXIT_OK


def cmd_train(args) -> int:
    """Train one network and write its checkpoint and learning curve."""
    store = _open_dataset(args.dataset)
    scheme, learning_rate = _single_scheme(args), _single_rate(args)
    unet_config = _unet_config(args, store.num_classes)
    train_config = _train_config(
        args, scheme, learning_rate, args.seed, checkpoint_interval=args.checkpoint_interval
    )
    label = run_label(scheme, learning_rate)
    try:
        result = train(
            store.pairs("train"),
            unet_config,
            train_config,
            validation=store.pairs("test") or None,
            checkpoint_dir=args.out_dir,
        )
    except TrainingDivergedError as e:
        write_curve_csv(e.curve, store.num_classes, args.out_dir / f"curve_{label}.csv")
        raise
    save_checkpoint(result.params, args.out_dir / f"model_{label}.vnet")
    write_curve_csv(result.curve, store.num_classes, args.out_dir / f"curve_{label}.csv")
    final = result.curve[-1]
    print(f"{label}: loss {final.loss:.5f}, mean foreground DSC {final.mean_foreground_dsc:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    """Write the probability map and the label volume of one segmented volume."""
    params = load_checkpoint(args.checkpoint)
    volume = read_volume(args.volume, expect="scalar")
    stride = args.stride
    probabilities, labels = segment_volume(params, volume, stride, args.workers)
    stem = args.volume.name.removesuffix(".vvol")
    write_volume(probabilities, args.out_dir / f"{stem}_prob.vvol")
    write_volume(labels, args.out_dir / f"{stem}_labels.vvol")
    print(f"Segmented {args.volume} into {args.out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Write the per-class Dice report of a prediction against its ground truth."""
    truth = read_volume(args.truth, expect="label")
    prediction = read_volume(args.prediction, num_classes=truth.num_classes, expect="label")
    if args.class_names:
        names = [name.strip() for name in args.class_names.split(",")]
    else:
        names = [f"class_{label}" for label in range(truth.num_classes)]
    if len(names) != truth.num_classes:
        raise UsageError(f"{len(names)} class names for {truth.num_classes} classes.")
    report = dice_report(prediction, truth, names)
    table = report_table({"dsc": report})
    args.out_dir.mkdir(parents=True, exist_ok=True)
    table.write_csv(args.out_dir / "report.csv")
    print(table)
    return EXIT_OK


def grid_run(train_pairs, test_pairs, class_names, unet_config, train_config, stride):
    """Train one grid run and score it on the test patients.

    Returns:
        tuple: (learning curve, test-set DiceReport or None when the run diverged)
    """
    try:
        result = train(train_pairs, unet_config, train_config, validation=test_pairs or None)
    except TrainingDivergedError as e:
        return e.curve, None
    reports = [
        dice_report(segment_volume(result.params, image, stride)[1], labels, class_names)
        for image, labels in (test_pairs or train_pairs)
    ]
    return result.curve, mean_dice_report(reports)


def cmd_grid(args) -> int:
    """Train every scheme x learning rate pair and write curves and Dice tables."""
    store = _open_dataset(args.dataset)
    schemes = [WeightingScheme(scheme) for scheme in (args.scheme or SCHEMES)]
    rates = args.lr or list(DEFAULT_LEARNING_RATES)
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1.")
    unet_config = _unet_config(args, store.num_classes)
    train_pairs, test_pairs = store.pairs("train"), store.pairs("test")
    runs = {}
    for scheme in schemes:
        for learning_rate in rates:
            runs[run_label(scheme, learning_rate)] = _train_config(
                args, scheme, learning_rate, derive_seed(args.seed, scheme, learning_rate)
            )
    jobs = [
        (train_pairs, test_pairs, store.class_names, unet_config, config, args.stride)
        for config in runs.values()
    ]
    logger.info("Grid of %d runs, %d at a time", len(jobs), args.parallel)
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            outcomes = list(pool.map(grid_run, *zip(*jobs)))
    else:
        outcomes = [grid_run(*job) for job in jobs]

    reports = {}
    for label, (curve, report) in zip(runs, outcomes):
        write_curve_csv(curve, store.num_classes, args.out_dir / f"curve_{label}.csv")
        reports[label] = report
        if report is None:
            logger.warning("Run %s diverged after %d curve points", label, len(curve))
        else:
            logger.info("Run %s finished, mean DSC %.4f", label, report.avg)
    table = report_table(reports, store.class_names)
    table.write_csv(args.out_dir / "report.csv")
    if any(report is not None for report in reports.values()):
        best_runs(reports).write_csv(args.out_dir / "best_runs.csv")
    else:
        logger.warning("Every grid run diverged, no best runs to report")
    print(table)
    return EXIT_OK


def main(argv=None) -> int:
    """Run the command line and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE
    set_verbosity(args.verbose)
    try:
        return args.handler(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"{parser.prog}: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


def run():
    """Console script entry point."""
    sys.exit(main())
