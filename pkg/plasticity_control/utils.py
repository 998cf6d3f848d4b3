import copy
import datetime
import json
import logging
import os
import shutil
import time
from typing import Dict, List, Optional, Tuple, Union

from plasticity_control import constants, errors


def get_logger(experiment_path: str, name: str) -> logging.Logger:
    """Produce python logger writing to the experiment folder and stderr.

    Handlers are attached once per logger name, so runners sharing a
    process do not duplicate each other's lines.

    Args:
        experiment_path: path to save of log file.
        name: name of logger.

    Returns:
        logger: logging object.
    """
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(constants.LOG_FORMAT)

    file_handler = logging.FileHandler(
        os.path.join(experiment_path, constants.LOG_FILE_NAME)
    )
    file_handler.setFormatter(formatter)

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    logger.addHandler(stream_handler)

    return logger


def configure_package_logging(level: int = logging.INFO) -> None:
    """Route the library loggers (``plasticity_control.*``) to stderr."""
    package_logger = logging.getLogger("plasticity_control")
    package_logger.setLevel(level)
    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(constants.LOG_FORMAT))
        package_logger.addHandler(handler)


def setup_experiment(
    mode: str,
    results_folder: str,
    config_path: str,
    config_changes: Optional[Dict[str, List[Dict]]] = None,
    seeds: Optional[List[int]] = None,
    base_changes: Optional[List[Dict]] = None,
    experiment_name: str = "",
) -> Tuple[str, Union[str, List[str]]]:
    """Construct the tree of output folders for an experiment.

    Every leaf folder receives a ``config_changes.json`` holding
    ``base_changes`` followed by the leaf's own changes (and its seed).

    Args:
        mode: name of experiment mode (single, serial, parallel).
        results_folder: location of all results.
        config_path: path to original yaml configuration file.
        config_changes: mapping of sub-experiment name to its changes.
        seeds: list of seeds over which to repeat experiment.
        base_changes: changes shared by every sub-experiment.
        experiment_name: suffix appended to the timestamp.

    Returns:
        experiment_path: root of the experiment.
        paths: single path or list of paths for each sub-experiment.

    Raises:
        UsageError: if a multi-run mode has neither seeds nor changes,
        or the mode is not recognised.
    """
    base_changes = base_changes or []
    timestamp = get_experiment_timestamp()
    experiment_name = f"{timestamp}{experiment_name}"
    experiment_path = os.path.join(results_folder, experiment_name)

    os.makedirs(name=experiment_path, exist_ok=True)
    config_copy_path = os.path.join(experiment_path, "config.yaml")
    shutil.copyfile(config_path, config_copy_path)

    if mode == constants.SINGLE:
        paths = _setup_single_experiment(
            experiment_path=experiment_path, base_changes=base_changes
        )
    elif mode in [constants.MULTI, constants.SERIAL, constants.PARALLEL]:
        if config_changes is None and seeds is None:
            raise errors.UsageError(
                "For any run mode with multiple sub-runs, require either specification of config changes or seeds"
            )
        config_changes = config_changes or {constants.SINGLE: []}
        config_changes_to_json(
            config_changes=config_changes,
            json_path=os.path.join(experiment_path, f"all_{constants.CONFIG_CHANGES_JSON}"),
        )
        paths = _organise_config_changes_and_checkpoint_dirs(
            experiment_path=experiment_path,
            config_changes=config_changes,
            seeds=seeds or [None],
            base_changes=base_changes,
        )
    else:
        raise errors.UsageError(f"run mode {mode} not recognised. Unable to setup_experiment.")

    return experiment_path, paths


def set_random_seeds(seed: int, packages: List[str]) -> None:
    """Set global seeds for packages with non-deterministic behaviour.

    The training loop draws from its own ``numpy.random.Generator``; these
    global seeds only cover code outside it.

    Args:
        seed: seed to set.
        packages: list of packages to import and set seeds for.

    Raises:
        ConfigurationError if package in list provided is not recognised.
    """
    managed_packages = []

    if constants.NUMPY in packages:
        import numpy as np

        np.random.seed(seed)
        managed_packages.append(constants.NUMPY)
    if constants.RANDOM in packages:
        import random

        random.seed(seed)
        managed_packages.append(constants.RANDOM)

    unmanaged_packages = [p for p in packages if p not in managed_packages]
    if unmanaged_packages:
        raise errors.ConfigurationError(
            f"Packages put up for seed setting not covered: {unmanaged_packages}"
        )


def config_changes_to_json(config_changes: Union[List[Dict], Dict], json_path: str) -> None:
    with open(json_path, "w") as json_file:
        json.dump(config_changes, json_file)


def json_to_config_changes(json_path: str) -> List[Dict]:
    with open(json_path, "r") as json_file:
        config_changes = json.load(json_file)
    return config_changes


def get_experiment_timestamp() -> str:
    """Get a timestamp in YY-MM-DD-HH-MM-SS format."""
    raw_datetime = datetime.datetime.fromtimestamp(time.time())
    return raw_datetime.strftime("%Y-%m-%d-%H-%M-%S")


def _organise_config_changes_and_checkpoint_dirs(
    experiment_path: str,
    config_changes: Dict[str, List[Dict]],
    seeds: List[Optional[int]],
    base_changes: List[Dict],
) -> List[str]:
    """Folders ``<run_name>/<seed>`` for every change set and seed.

    Args:
        experiment_path: overall experiment path.
        config_changes: specification of config changes.
        seeds: list of seeds over which experiment is to be repeated.
        base_changes: changes applied before each run's own.

    Returns:
        checkpoint_paths: list of output paths.
    """
    checkpoint_paths = []
    for run_name, changes in config_changes.items():
        for seed in seeds:
            changes_copy = copy.deepcopy(base_changes) + copy.deepcopy(changes)
            changes_copy.append({constants.RUN_ID: run_name})
            if seed is None:
                seed_path = constants.SINGLE
            else:
                seed_path = str(seed)
                changes_copy.append({constants.SEED: seed})
            checkpoint_path = os.path.join(experiment_path, run_name, seed_path)
            os.makedirs(name=checkpoint_path, exist_ok=True)
            config_changes_to_json(
                config_changes=changes_copy,
                json_path=os.path.join(checkpoint_path, constants.CONFIG_CHANGES_JSON),
            )
            checkpoint_paths.append(checkpoint_path)
    return checkpoint_paths


def _setup_single_experiment(experiment_path: str, base_changes: List[Dict]) -> str:
    single_checkpoint_path = os.path.join(experiment_path, constants.SINGLE)
    os.makedirs(name=single_checkpoint_path, exist_ok=True)
    config_changes_to_json(
        config_changes=base_changes,
        json_path=os.path.join(single_checkpoint_path, constants.CONFIG_CHANGES_JSON),
    )
    return single_checkpoint_path


def process_seed_arguments(seeds: Union[str, List[int], int]) -> List[int]:
    """Seed specification from command line often in string format.

    An int n means seeds 0..n-1; a string is "3" or "1,2,3" (brackets allowed).

    Args:
        seeds: str encoding of seeds.

    Returns:
        seeds: list of seed ints.

    Raises:
        UsageError: if the string cannot be parsed.
    """
    if isinstance(seeds, int):
        return list(range(seeds))
    if isinstance(seeds, list):
        return [int(s) for s in seeds]
    try:
        return [int(s) for s in seeds.strip("[").strip("]").split(",") if s.strip()]
    except ValueError:
        raise errors.UsageError(f"cannot parse seeds from {seeds!r}")
