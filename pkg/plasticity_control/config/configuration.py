import os
from typing import Dict, List

from config_manager import base_configuration

from plasticity_control import constants, errors
from plasticity_control.config.config_template import PlasticityConfigTemplate
from plasticity_control.consolidation import NpcConfig, StrategyConfig
from plasticity_control.nn_layers import ModelSpec
from plasticity_control.training import RunConfig

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.realpath(__file__)), "config.yaml")

# reduced settings that still exercise every training pathway
DESK_CHANGES: List[Dict] = [
    {
        constants.MODEL: {
            constants.CONV_CHANNELS: [16, 32, 32],
            constants.DENSE_WIDTHS: [128],
        }
    },
    {constants.TRAINING: {constants.BATCH_SIZE: 128, constants.EPOCHS: 5}},
]

PROFILE_CHANGES: Dict[str, List[Dict]] = {constants.FULL: [], constants.DESK: DESK_CHANGES}

PENALTY_STRENGTH_FIELDS = {
    constants.EWC: constants.EWC_LAMBDA,
    constants.MAS: constants.MAS_LAMBDA,
    constants.SI: constants.SI_LAMBDA,
}


class PlasticityConfig(base_configuration.BaseConfiguration):
    """Run configuration validated against ``PlasticityConfigTemplate``."""

    def __init__(self, config, changes: List[Dict] = []) -> None:
        """
        Args:
            config: path to a yaml file (or an already parsed mapping).
            changes: nested mappings applied on top of the file, in order.

        Raises:
            ConfigurationError: if the file is missing or a value fails
            its template requirements.
        """
        if isinstance(config, str) and not os.path.isfile(config):
            raise errors.ConfigurationError(f"configuration file not found: {config}")
        try:
            super().__init__(
                configuration=config,
                changes=changes,
                template=PlasticityConfigTemplate.base_template,
            )
        except (AssertionError, KeyError, ValueError) as error:
            raise errors.ConfigurationError(f"invalid configuration: {error}") from error
        self._validate_configuration()

    def _validate_configuration(self) -> None:
        """Cross-field checks the template cannot express.

        Raises:
            ConfigurationError: if the task split is impossible.
        """
        class_order = getattr(self, constants.CLASS_ORDER)
        num_tasks = getattr(self, constants.NUM_TASKS)
        if class_order and len(class_order) % num_tasks:
            raise errors.ConfigurationError(
                f"{len(class_order)} classes in class_order cannot be split into {num_tasks} tasks"
            )
        max_tasks = getattr(self, constants.MAX_TASKS)
        if max_tasks > num_tasks:
            raise errors.ConfigurationError(
                f"max_tasks {max_tasks} exceeds num_tasks {num_tasks}"
            )


def resolve_data_dir(configured) -> str:
    """Configured directory, else the ``NPC_DATA_DIR`` environment variable."""
    return configured or os.environ.get(constants.DATA_DIR_ENV, "")


def run_config_from(config: base_configuration.BaseConfiguration, output_dir: str) -> RunConfig:
    """Translate a validated configuration into the trainer's ``RunConfig``."""
    strategy = getattr(config, constants.STRATEGY)
    strategy_config = StrategyConfig(
        name=strategy,
        npc=NpcConfig(
            alpha=float(getattr(config, constants.ALPHA)),
            beta=float(getattr(config, constants.BETA)),
            eta_max=float(getattr(config, constants.ETA_MAX)),
        ),
        delta=float(getattr(config, constants.DELTA)),
        swap_delta=getattr(config, constants.SWAP_DELTA),
        learning_rate=float(getattr(config, constants.LEARNING_RATE)),
        penalty_strength=float(
            getattr(config, PENALTY_STRENGTH_FIELDS[strategy]) if strategy in PENALTY_STRENGTH_FIELDS else 0.0
        ),
        si_damping=float(getattr(config, constants.SI_DAMPING)),
        importance_samples=getattr(config, constants.IMPORTANCE_SAMPLES),
    )
    model = ModelSpec(
        conv_channels=tuple(getattr(config, constants.CONV_CHANNELS)),
        dense_widths=tuple(getattr(config, constants.DENSE_WIDTHS)),
        kernel_size=getattr(config, constants.KERNEL_SIZE),
        dropout_rate=float(getattr(config, constants.DROPOUT_RATE)),
    )
    return RunConfig(
        model=model,
        strategy=strategy_config,
        dataset=getattr(config, constants.DATASET),
        data_dir=resolve_data_dir(getattr(config, constants.DATA_DIR)),
        num_tasks=getattr(config, constants.NUM_TASKS),
        max_tasks=getattr(config, constants.MAX_TASKS),
        class_order=tuple(getattr(config, constants.CLASS_ORDER)),
        samples_per_class=getattr(config, constants.SAMPLES_PER_CLASS),
        pad_to=getattr(config, constants.PAD_TO),
        epochs=getattr(config, constants.EPOCHS),
        batch_size=getattr(config, constants.BATCH_SIZE),
        total_train_count=getattr(config, constants.TOTAL_TRAIN_COUNT),
        seed=getattr(config, constants.SEED),
        precision=getattr(config, constants.PRECISION),
        probe_samples=getattr(config, constants.PROBE_SAMPLES),
        log_wall_time=getattr(config, constants.LOG_WALL_TIME),
        output_dir=output_dir,
        run_id=getattr(config, constants.RUN_ID),
    )
