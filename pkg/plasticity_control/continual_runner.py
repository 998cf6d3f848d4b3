from typing import List, Optional, Type

from config_manager import base_configuration

from plasticity_control import base_runner, constants
from plasticity_control.config import configuration
from plasticity_control.datasets import TaskStream
from plasticity_control.metrics import MetricsRecord
from plasticity_control.training import RunConfig, SequenceResult, run_sequence


class ContinualRunner(base_runner.BaseRunner):
    """Trains one strategy over the task sequence of one configuration.

    Per-step loss, mean learning rate and mean importance go to the data
    logger alongside the average accuracy of every evaluation point; CSV
    metrics, checkpoints and analyses are written to the checkpoint path.
    """

    def __init__(
        self,
        config: Type[base_configuration.BaseConfiguration],
        unique_id: str = "",
        stream: Optional[TaskStream] = None,
    ) -> None:
        super().__init__(config=config, unique_id=unique_id)
        self._run_config: RunConfig = configuration.run_config_from(
            config, output_dir=self._checkpoint_path
        )
        self._stream = stream
        self._result: Optional[SequenceResult] = None

    def _get_data_columns(self) -> List[str]:
        return [
            constants.LOSS,
            constants.MEAN_LEARNING_RATE,
            constants.MEAN_IMPORTANCE,
            constants.AVERAGE_ACCURACY,
        ]

    @property
    def run_config(self) -> RunConfig:
        return self._run_config

    @property
    def result(self) -> Optional[SequenceResult]:
        return self._result

    def _on_epoch(self, step: int, record: MetricsRecord) -> None:
        self._data_logger.write_scalar(
            tag=constants.AVERAGE_ACCURACY, step=step, scalar=record.average_accuracy
        )
        self._data_logger.checkpoint()

    def train(self) -> None:
        self._logger.info(
            f"Training {self._run_config.strategy.name} on {self._run_config.dataset} "
            f"(seed {self._run_config.seed})"
        )
        self._result = run_sequence(
            self._run_config,
            stream=self._stream,
            on_step=self._write_scalars,
            on_epoch=self._on_epoch,
        )
        self._data_logger.checkpoint()
        final = self._result.records[-1] if self._result.records else None
        if final is not None:
            self._logger.info(
                f"Finished: average accuracy {final.average_accuracy:.4f} over {len(final.accuracies)} tasks"
            )
