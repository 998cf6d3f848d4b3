import logging
import multiprocessing as mp
import os
import sys
from typing import Dict, List, Optional, Type

from config_manager import base_configuration

from plasticity_control import base_runner, constants, errors, metrics, single_run, utils

logger = logging.getLogger(__name__)


def exit_code_for(error: BaseException) -> int:
    """Process exit code for an exception raised by a run."""
    if isinstance(error, errors.NumericalAbort):
        return constants.EXIT_NUMERICAL
    if isinstance(error, errors.DataError):
        return constants.EXIT_DATA
    return constants.EXIT_USAGE


def _run_leaf(
    runner_class: Type[base_runner.BaseRunner],
    config_class: Type[base_configuration.BaseConfiguration],
    run_methods: List[str],
    config_path: str,
    checkpoint_path: str,
    changes: List[Dict],
    stochastic_packages: List[str],
) -> None:
    try:
        single_run.single_run(
            runner_class=runner_class,
            config_class=config_class,
            run_methods=run_methods,
            config_path=config_path,
            checkpoint_path=checkpoint_path,
            changes=changes,
            stochastic_packages=stochastic_packages,
        )
    except errors.PlasticityError as error:
        logger.error(f"{checkpoint_path}: {error}")
        sys.exit(exit_code_for(error))


def parallel_run(
    runner_class: Type[base_runner.BaseRunner],
    config_class: Type[base_configuration.BaseConfiguration],
    run_methods: List[str],
    config_path: str,
    checkpoint_paths: List[str],
    experiment_path: str,
    stochastic_packages: List[str] = [],
    max_processes: Optional[int] = None,
) -> Dict[str, int]:
    """Set of experiments run in parallel using multiprocessing module.

    Each leaf runs in its own process with isolated state and output
    folder; at most ``max_processes`` (default: cpu count) run at once.
    Completed runs are aggregated into the experiment summary.

    Args:
        runner_class: runner class to be instantiated.
        config_class: configuration class to be instantiated.
        run_methods: list of methods to be called on runner class.
        config_path: path to yaml configuration file for experiment.
        checkpoint_paths: leaf folders, each holding its config_changes.json.
        experiment_path: experiment root receiving the aggregated summary.
        stochastic_packages: list of packages (by name) for which seeds are to be set.
        max_processes: concurrency limit.

    Returns:
        exit_codes: process exit code per leaf folder.
    """
    max_processes = max_processes or os.cpu_count() or 1
    exit_codes: Dict[str, int] = {}

    for start in range(0, len(checkpoint_paths), max_processes):
        processes = []
        for checkpoint_path in checkpoint_paths[start : start + max_processes]:
            changes = utils.json_to_config_changes(
                os.path.join(checkpoint_path, constants.CONFIG_CHANGES_JSON)
            )
            process = mp.Process(
                target=_run_leaf,
                args=(
                    runner_class,
                    config_class,
                    run_methods,
                    config_path,
                    checkpoint_path,
                    changes,
                    stochastic_packages,
                ),
            )
            process.start()
            processes.append((checkpoint_path, process))

        for checkpoint_path, process in processes:
            process.join()
            exit_codes[checkpoint_path] = process.exitcode

    failed = {path: code for path, code in exit_codes.items() if code != constants.EXIT_SUCCESS}
    if failed:
        logger.warning(f"{len(failed)} of {len(exit_codes)} runs failed: {failed}")
    metrics.aggregate_experiment(experiment_path)
    return exit_codes

