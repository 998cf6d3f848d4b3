"""
Command line entry point: ``plasticity-control {train,eval,analyze,sweep}``.

Flags are translated into configuration changes applied on top of the
YAML file (after the selected profile), so flags override the file.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical abort.
"""
import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from plasticity_control import (
    analysis,
    checkpoint,
    constants,
    continual_runner,
    errors,
    parallel_run,
    serial_run,
    single_run,
    training,
    utils,
)
from plasticity_control.config import configuration
from plasticity_control.consolidation import validate_strategy_parameters
from plasticity_control.tensor_core import parameter

logger = logging.getLogger(__name__)

LAMBDA = "lambda"

# flag destination -> (config section, field)
FLAG_FIELDS = {
    "dataset": (constants.DATA, constants.DATASET),
    "data_dir": (constants.DATA, constants.DATA_DIR),
    "tasks": (constants.DATA, constants.NUM_TASKS),
    "max_tasks": (constants.DATA, constants.MAX_TASKS),
    "samples_per_class": (constants.DATA, constants.SAMPLES_PER_CLASS),
    "precision": (constants.MODEL, constants.PRECISION),
    "strategy": (constants.TRAINING, constants.STRATEGY),
    "epochs": (constants.TRAINING, constants.EPOCHS),
    "batch_size": (constants.TRAINING, constants.BATCH_SIZE),
    "learning_rate": (constants.TRAINING, constants.LEARNING_RATE),
    "alpha": (constants.NPC_SECTION, constants.ALPHA),
    "beta": (constants.NPC_SECTION, constants.BETA),
    "eta_max": (constants.NPC_SECTION, constants.ETA_MAX),
    "delta": (constants.NPC_SECTION, constants.DELTA),
    "swap_delta": (constants.NPC_SECTION, constants.SWAP_DELTA),
    "si_damping": (constants.PENALTY, constants.SI_DAMPING),
    "probe_samples": (constants.ANALYSIS, constants.PROBE_SAMPLES),
}
# flags only some strategies accept
STRATEGY_FLAGS = {
    "alpha": constants.ALPHA,
    "beta": constants.BETA,
    "eta_max": constants.ETA_MAX,
    LAMBDA: LAMBDA,
    "learning_rate": constants.LEARNING_RATE,
    "si_damping": constants.SI_DAMPING,
}
SWEEP_PARAMETERS = [LAMBDA, constants.ALPHA, constants.BETA, constants.ETA_MAX, constants.LEARNING_RATE]
DEFAULT_GRID = [10.0 ** exponent for exponent in range(-3, 4)]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise errors.UsageError(message)


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.strip("[").strip("]").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid float list: {value!r}")


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", default=configuration.DEFAULT_CONFIG_PATH, help="path to base yaml configuration file."
    )
    parser.add_argument("--profile", choices=constants.PROFILES, default=constants.FULL)
    parser.add_argument("--dataset", choices=constants.DATASETS)
    parser.add_argument(
        "--data-dir",
        dest="data_dir",
        help=f"dataset folder (default: configuration, then ${constants.DATA_DIR_ENV}).",
    )
    parser.add_argument("--tasks", type=int, help="number of tasks the classes are split into.")
    parser.add_argument("--max-tasks", dest="max_tasks", type=int, help="train only the first n tasks.")
    parser.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--strategy", choices=constants.STRATEGIES)


def _add_training_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seeds", help="comma separated seeds, e.g. 1,2,3.")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--precision", choices=[constants.FLOAT32, constants.FLOAT64])
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--eta-max", dest="eta_max", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--swap-delta", dest="swap_delta", action="store_const", const=True)
    parser.add_argument("--lambda", dest=LAMBDA, type=float, help="penalty strength of ewc, mas or si.")
    parser.add_argument("--si-damping", dest="si_damping", type=float)
    parser.add_argument("--probe-samples", dest="probe_samples", type=int)
    parser.add_argument(
        "--no-wall-time", dest="no_wall_time", action="store_true", help="write wall_ms as 0."
    )
    parser.add_argument("--results-folder", dest="results_folder", default="results")
    parser.add_argument("--name", default="", help="suffix of the experiment folder.")
    parser.add_argument("--plot", action="store_true", help="plot learning curves after training.")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plasticity-control")
    subparsers = parser.add_subparsers(dest="command")
    subparsers.required = True

    train = subparsers.add_parser("train", help="train a strategy over the task sequence.")
    _add_config_arguments(train)
    _add_training_arguments(train)

    sweep = subparsers.add_parser("sweep", help="grid over one hyperparameter.")
    _add_config_arguments(sweep)
    _add_training_arguments(sweep)
    sweep.add_argument("--param", choices=SWEEP_PARAMETERS, default=LAMBDA)
    sweep.add_argument("--values", type=_float_list, default=DEFAULT_GRID)
    sweep.add_argument("--serial", action="store_true", help="run grid points one after another.")
    sweep.add_argument("--processes", type=int, help="maximum concurrent runs.")

    evaluate = subparsers.add_parser("eval", help="score a checkpoint on every task.")
    _add_config_arguments(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--output", help=f"csv path (default: {constants.EVAL_CSV} next to the checkpoint).")

    analyze = subparsers.add_parser("analyze", help="activation change between two checkpoints.")
    _add_config_arguments(analyze)
    analyze.add_argument("--before", required=True)
    analyze.add_argument("--after", required=True)
    analyze.add_argument("--probe-task", dest="probe_task", type=int, default=1)
    analyze.add_argument("--probe-samples", dest="probe_samples", type=int)
    analyze.add_argument("--output-dir", dest="output_dir", default=".")

    return parser


def _flag_changes(args: argparse.Namespace, strategy: Optional[str]) -> List[Dict]:
    changes = []
    for flag, (section, field) in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes.append({section: {field: value}})
    if getattr(args, LAMBDA, None) is not None and strategy in configuration.PENALTY_STRENGTH_FIELDS:
        changes.append(
            {constants.PENALTY: {configuration.PENALTY_STRENGTH_FIELDS[strategy]: getattr(args, LAMBDA)}}
        )
    if getattr(args, "no_wall_time", False):
        changes.append({constants.LOGGING: {constants.LOG_WALL_TIME: False}})
    if args.seed is not None:
        changes.append({constants.SEED: args.seed})
    return changes


def _strategy_flags(args: argparse.Namespace) -> List[str]:
    return [name for flag, name in STRATEGY_FLAGS.items() if getattr(args, flag, None) is not None]


def resolve_changes(args: argparse.Namespace) -> List[Dict]:
    """Profile changes, then flag changes, validated against the strategy.

    Raises:
        UsageError: if a flag has no meaning for the selected strategy.
        DataError: if no existing data directory can be resolved.
    """
    base = list(configuration.PROFILE_CHANGES[args.profile])
    config = configuration.PlasticityConfig(config=args.config, changes=base + _flag_changes(args, None))
    strategy = getattr(config, constants.STRATEGY)
    try:
        validate_strategy_parameters(strategy, _strategy_flags(args))
    except errors.ConfigurationError as error:
        raise errors.UsageError(str(error))

    data_dir = configuration.resolve_data_dir(getattr(config, constants.DATA_DIR))
    if not data_dir or not os.path.isdir(data_dir):
        raise errors.DataError(
            f"data directory not found: {data_dir!r} (set --data-dir or ${constants.DATA_DIR_ENV})"
        )
    changes = base + _flag_changes(args, strategy)
    changes.append({constants.DATA: {constants.DATA_DIR: data_dir}})
    return changes


def _run_methods(args: argparse.Namespace) -> List[str]:
    return ["train", "plot"] if args.plot else ["train"]


def _train(args: argparse.Namespace) -> int:
    changes = resolve_changes(args)
    seeds = utils.process_seed_arguments(args.seeds) if args.seeds else None
    if seeds is None or len(seeds) == 1:
        if seeds:
            changes.append({constants.SEED: seeds[0]})
        _, checkpoint_path = utils.setup_experiment(
            mode=constants.SINGLE,
            results_folder=args.results_folder,
            config_path=args.config,
            base_changes=changes,
            experiment_name=args.name,
        )
        runner = single_run.single_run(
            runner_class=continual_runner.ContinualRunner,
            config_class=configuration.PlasticityConfig,
            run_methods=_run_methods(args),
            config_path=args.config,
            checkpoint_path=checkpoint_path,
            changes=changes,
            stochastic_packages=[constants.NUMPY, constants.RANDOM],
        )
        logger.info(f"Results written to {runner.checkpoint_path}")
        return constants.EXIT_SUCCESS

    experiment_path, checkpoint_paths = utils.setup_experiment(
        mode=constants.SERIAL,
        results_folder=args.results_folder,
        config_path=args.config,
        config_changes={args.strategy or constants.SINGLE: []},
        seeds=seeds,
        base_changes=changes,
        experiment_name=args.name,
    )
    summary = serial_run.serial_run(
        runner_class=continual_runner.ContinualRunner,
        config_class=configuration.PlasticityConfig,
        run_methods=_run_methods(args),
        config_path=args.config,
        checkpoint_paths=checkpoint_paths,
        experiment_path=experiment_path,
        stochastic_packages=[constants.NUMPY, constants.RANDOM],
    )
    logger.info(f"Summary over seeds {seeds}:\n{summary.to_string(index=False)}")
    return constants.EXIT_SUCCESS


def sweep_changes(strategy: str, param: str, values: Sequence[float]) -> Dict[str, List[Dict]]:
    """One named change set per grid value of ``param``.

    Raises:
        UsageError: if ``param`` is not a parameter of ``strategy``.
    """
    try:
        validate_strategy_parameters(strategy, [param])
    except errors.ConfigurationError as error:
        raise errors.UsageError(str(error))
    if param == LAMBDA:
        section, field = constants.PENALTY, configuration.PENALTY_STRENGTH_FIELDS[strategy]
    else:
        section, field = FLAG_FIELDS[param]
    return {f"{strategy}_{param}_{value:g}": [{section: {field: float(value)}}] for value in values}


def _sweep(args: argparse.Namespace) -> int:
    changes = resolve_changes(args)
    config = configuration.PlasticityConfig(config=args.config, changes=changes)
    strategy = getattr(config, constants.STRATEGY)
    grid = sweep_changes(strategy, args.param, args.values)
    seeds = utils.process_seed_arguments(args.seeds) if args.seeds else [getattr(config, constants.SEED)]
    mode = constants.SERIAL if args.serial else constants.PARALLEL
    experiment_path, checkpoint_paths = utils.setup_experiment(
        mode=mode,
        results_folder=args.results_folder,
        config_path=args.config,
        config_changes=grid,
        seeds=seeds,
        base_changes=changes,
        experiment_name=args.name or f"_sweep_{strategy}_{args.param}",
    )
    run_kwargs = dict(
        runner_class=continual_runner.ContinualRunner,
        config_class=configuration.PlasticityConfig,
        run_methods=_run_methods(args),
        config_path=args.config,
        checkpoint_paths=checkpoint_paths,
        experiment_path=experiment_path,
        stochastic_packages=[constants.NUMPY, constants.RANDOM],
    )
    if args.serial:
        serial_run.serial_run(**run_kwargs)
        return constants.EXIT_SUCCESS
    exit_codes = parallel_run.parallel_run(max_processes=args.processes, **run_kwargs)
    return max(exit_codes.values(), default=constants.EXIT_SUCCESS)


def _stream_for(args: argparse.Namespace):
    changes = resolve_changes(args)
    config = configuration.PlasticityConfig(config=args.config, changes=changes)
    run_config = configuration.run_config_from(config, output_dir=".")
    stream = training.build_stream(run_config, np.random.default_rng(run_config.seed))
    return run_config, stream


def _check_compatible(loaded: checkpoint.Checkpoint, stream, path: str) -> None:
    image_shape = tuple(stream.tasks[0].validation.images.shape[1:])
    if loaded.spec.num_classes != stream.num_classes or loaded.spec.input_shape != image_shape:
        raise errors.ConfigurationError(
            f"{path}: model ({loaded.spec.num_classes} classes, input {loaded.spec.input_shape}) "
            f"does not fit the data ({stream.num_classes} classes, input {image_shape})"
        )


def _eval(args: argparse.Namespace) -> int:
    run_config, stream = _stream_for(args)
    loaded = checkpoint.load_checkpoint(args.checkpoint)
    _check_compatible(loaded, stream, args.checkpoint)
    tasks = stream.tasks[: run_config.max_tasks] if run_config.max_tasks else stream.tasks
    params = {name: parameter(values) for name, values in loaded.params.items()}
    accuracies = training.evaluate(loaded.spec, params, tasks)
    frame = pd.DataFrame(
        {
            "task": [index + 1 for index in accuracies],
            "classes": [" ".join(str(c) for c in tasks[index].classes) for index in accuracies],
            "accuracy": list(accuracies.values()),
        }
    )
    output = args.output or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), constants.EVAL_CSV)
    frame.to_csv(output, index=False)
    logger.info(f"Average accuracy {frame['accuracy'].mean():.4f} over {len(frame)} tasks; written to {output}")
    return constants.EXIT_SUCCESS


def _analyze(args: argparse.Namespace) -> int:
    run_config, stream = _stream_for(args)
    before = checkpoint.load_checkpoint(args.before)
    after = checkpoint.load_checkpoint(args.after, expected_spec=before.spec)
    _check_compatible(before, stream, args.before)
    if not 1 <= args.probe_task <= len(stream):
        raise errors.UsageError(f"--probe-task {args.probe_task} outside 1..{len(stream)}")
    probe = analysis.select_probe(
        stream[args.probe_task - 1].validation,
        run_config.probe_samples,
        np.random.default_rng(run_config.seed),
    )
    result = analysis.activation_change_analysis(before, after, probe)
    os.makedirs(args.output_dir, exist_ok=True)
    result.table.to_csv(os.path.join(args.output_dir, constants.ACTIVATION_CHANGE_CSV), index=False)
    summary = result.summary_frame()
    summary.to_csv(os.path.join(args.output_dir, constants.ACTIVATION_SUMMARY_CSV), index=False)
    logger.info(f"Activation change:\n{summary.to_string(index=False)}")
    return constants.EXIT_SUCCESS


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": _train,
    "sweep": _sweep,
    "eval": _eval,
    "analyze": _analyze,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    utils.configure_package_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except errors.NumericalAbort as error:
        logger.error(f"numerical abort: {error}")
        return constants.EXIT_NUMERICAL
    except errors.DataError as error:
        logger.error(f"data error: {error}")
        return constants.EXIT_DATA
    except errors.PlasticityError as error:
        logger.error(f"usage error: {error}")
        return constants.EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
