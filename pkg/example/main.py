"""
Desk-scale split-MNIST comparison of fine-tuning, CPC and NPC over three
seeds. Expects the MNIST IDX files under $NPC_DATA_DIR.
"""
import os

from plasticity_control import constants, continual_runner, serial_run, utils
from plasticity_control.config import configuration

MAIN_FILE_PATH = os.path.dirname(os.path.realpath(__file__))
CONFIG_PATH = os.path.join(MAIN_FILE_PATH, "config.yaml")

STRATEGIES = [constants.FINETUNE, constants.CPC, constants.NPC]
SEEDS = [0, 1, 2]

if __name__ == "__main__":

    utils.configure_package_logging()

    experiment_path, checkpoint_paths = utils.setup_experiment(
        mode=constants.SERIAL,
        results_folder=os.path.join(MAIN_FILE_PATH, "example_results"),
        config_path=CONFIG_PATH,
        config_changes={
            strategy: [{constants.TRAINING: {constants.STRATEGY: strategy}}]
            for strategy in STRATEGIES
        },
        seeds=SEEDS,
        experiment_name="_desk_comparison",
    )

    summary = serial_run.serial_run(
        runner_class=continual_runner.ContinualRunner,
        config_class=configuration.PlasticityConfig,
        run_methods=["train", "plot"],
        config_path=CONFIG_PATH,
        checkpoint_paths=checkpoint_paths,
        experiment_path=experiment_path,
        stochastic_packages=[constants.NUMPY, constants.RANDOM],
    )

    print(summary.to_string(index=False))
