"""
Sequential training over a task stream.

Each step follows a fixed order: forward, loss (plus any penalty),
backward, importance update, learning-rate computation and weight update.
Evaluation scores every task seen so far against its own output subset
after each redefined epoch.
"""
import dataclasses
import itertools
import logging
import os
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from plasticity_control import analysis, checkpoint, constants, errors, metrics
from plasticity_control.consolidation import (
    ConsolidationStrategy,
    Params,
    StrategyConfig,
    build_strategy,
)
from plasticity_control.datasets import (
    AugmentationPolicy,
    EpochPlan,
    Task,
    TaskStream,
    augment,
    epoch_iterator,
    load_dataset,
    pad_images,
    policy_for,
    split_tasks,
    subsample_per_class,
)
from plasticity_control.importance import (
    ImportanceState,
    dump_importance_csv,
    registry_raw,
    task_neuron_mask,
)
from plasticity_control.nn_layers import (
    ModelSpec,
    NeuronRegistry,
    build_registry,
    init_params,
    masked_cross_entropy,
    masked_predictions,
    model_forward,
)
from plasticity_control.tensor_core import Tensor, zero_grad

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 500

StepCallback = Callable[[int, Dict[str, float]], None]


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a continual-learning run depends on.

    ``model.num_classes`` and ``model.input_shape`` are overwritten from the
    task stream when the run starts.
    """

    model: ModelSpec = dataclasses.field(default_factory=ModelSpec)
    strategy: StrategyConfig = dataclasses.field(default_factory=StrategyConfig)
    dataset: str = constants.MNIST
    data_dir: str = ""
    num_tasks: int = 5
    max_tasks: int = 0
    class_order: Tuple[int, ...] = ()
    samples_per_class: int = 0
    pad_to: int = 32
    epochs: int = 30
    batch_size: int = 512
    total_train_count: int = 0
    seed: int = 0
    precision: str = constants.FLOAT32
    probe_samples: int = 256
    log_wall_time: bool = True
    output_dir: str = "."
    run_id: str = ""

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise errors.ConfigurationError(
                f"epochs and batch size must be positive, got {self.epochs} and {self.batch_size}"
            )
        if self.precision not in (constants.FLOAT32, constants.FLOAT64):
            raise errors.ConfigurationError(f"unsupported precision {self.precision!r}")
        if self.dataset not in constants.DATASETS:
            raise errors.ConfigurationError(f"unknown dataset {self.dataset!r}")

    @property
    def label(self) -> str:
        return self.run_id or self.strategy.name


class StepTrace:
    """Records (step, event, tick) triples; ticks increase monotonically."""

    def __init__(self) -> None:
        self.events: List[Tuple[int, str, int]] = []
        self._ticks = itertools.count()

    def __call__(self, step: int, event: str) -> None:
        self.events.append((step, event, next(self._ticks)))

    def ticks(self, event: str) -> Dict[int, int]:
        return {step: tick for step, name, tick in self.events if name == event}


def evaluate(
    spec: ModelSpec, params: Params, tasks: Sequence[Task], batch_size: int = EVAL_BATCH_SIZE
) -> Dict[int, float]:
    """Validation accuracy per task (masked argmax over the task's outputs).

    Runs in evaluation mode and never touches gradients or parameters.
    """
    accuracies = {}
    for task in tasks:
        samples = task.validation
        if len(samples) == 0:
            raise errors.DataError(f"task {task.index} has no validation samples")
        correct = 0
        for start in range(0, len(samples), batch_size):
            images = samples.images[start : start + batch_size].astype(_dtype_of(params))
            logits = model_forward(spec, params, images, training=False).logits.data
            predictions = masked_predictions(logits, task.classes)
            correct += int(np.sum(predictions == samples.labels[start : start + batch_size]))
        accuracies[task.index] = correct / len(samples)
    return accuracies


def _dtype_of(params: Params) -> np.dtype:
    return next(iter(params.values())).dtype


class ContinualLearner:
    """Owns the model parameters, importance state and strategy of one run."""

    def __init__(
        self,
        spec: ModelSpec,
        params: Params,
        strategy_config: StrategyConfig,
        rng: np.random.Generator,
        trace: Optional[StepTrace] = None,
    ) -> None:
        self.spec = spec
        self.params = params
        self.registry: NeuronRegistry = build_registry(spec, params)
        self.importance = ImportanceState.zeros(
            len(self.registry), delta=strategy_config.delta, swap_delta=strategy_config.swap_delta
        )
        self.strategy: ConsolidationStrategy = build_strategy(
            strategy_config, self.registry, params, self.importance
        )
        self._strategy_config = strategy_config
        self._rng = rng
        self._trace = trace
        self.step = 0

    def forward_fn(self, params: Params, images: np.ndarray) -> Tensor:
        return model_forward(self.spec, params, images.astype(_dtype_of(params)), training=False).logits

    def _diagnostics(self) -> Dict[str, float]:
        values = {"step": self.step}
        values.update(self.strategy.diagnostics())
        values.update(
            importance_min=float(self.importance.C.min()),
            importance_mean=float(self.importance.C.mean()),
            importance_max=float(self.importance.C.max()),
        )
        return values

    def train_step(
        self, images: np.ndarray, labels: np.ndarray, task: Task, policy: AugmentationPolicy
    ) -> Dict[str, float]:
        """One mini-batch in the fixed order of the plasticity-control loop.

        Raises:
            NumericalAbort: if the loss is not finite.
        """
        images = augment(images, policy, self._rng).astype(_dtype_of(self.params))
        result = model_forward(self.spec, self.params, images, training=True, rng=self._rng)
        loss = masked_cross_entropy(result.logits, labels, task.classes)
        task_loss = loss.item()
        penalty = self.strategy.regularizer(self.params)
        if penalty is not None:
            loss = loss + penalty
        if not np.isfinite(loss.item()):
            raise errors.NumericalAbort("non-finite loss", self._diagnostics())
        zero_grad(list(self.params.values()))
        loss.backward()

        active = task_neuron_mask(self.registry, task.classes)
        raw = registry_raw(result.taps, self.registry)
        self.importance.observe(raw, self.registry.layer_index, active)
        if self._trace is not None:
            self._trace(self.step, constants.IMPORTANCE_EVENT)
        self.strategy.active_neurons = active
        stats = self.strategy.apply_update(self.params)
        if self._trace is not None:
            self._trace(self.step, constants.UPDATE_EVENT)
        self.step += 1
        return {
            constants.LOSS: task_loss,
            constants.MEAN_LEARNING_RATE: stats["lr_mean"],
            constants.MEAN_IMPORTANCE: float(self.importance.C.mean()),
        }

    def train_task(
        self,
        task: Task,
        plan: EpochPlan,
        epochs: int,
        policy: AugmentationPolicy,
        on_epoch_end: Optional[Callable[[int], None]] = None,
        on_step: Optional[StepCallback] = None,
    ) -> List[float]:
        """Train on one task for ``epochs`` redefined epochs.

        Returns:
            mean task loss per epoch.
        """
        self.strategy.begin_task(self.params)
        epoch_losses = []
        for epoch in range(epochs):
            losses = []
            for images, labels in epoch_iterator(task, plan, self._rng):
                scalars = self.train_step(images, labels, task, policy)
                losses.append(scalars[constants.LOSS])
                if on_step is not None:
                    on_step(self.step, scalars)
            epoch_losses.append(float(np.mean(losses)))
            logger.info(
                f"task {task.index + 1} epoch {epoch + 1}/{epochs}: loss {epoch_losses[-1]:.4f}"
            )
            if on_epoch_end is not None:
                on_epoch_end(epoch)
        return epoch_losses

    def end_task(self, task: Task, num_samples: int) -> None:
        index = self._rng.permutation(len(task.train))[:num_samples]
        inputs = task.train.images[np.sort(index)]
        self.strategy.end_task(self.params, self.forward_fn, inputs, task.classes)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"importance/C": self.importance.C, "importance/step": np.array(self.importance.step)}
        arrays.update({f"strategy/{k}": v for k, v in self.strategy.state_arrays().items()})
        return arrays

    def save(self, path: str, metadata: Optional[Dict] = None) -> None:
        checkpoint.save_checkpoint(path, self.spec, self.params, self.state_arrays(), metadata)


def build_stream(config: RunConfig, rng: np.random.Generator) -> TaskStream:
    """Load, pad and split the configured dataset.

    Raises:
        DataError: if the data directory or files are missing.
    """
    train, validation = load_dataset(config.dataset, config.data_dir)
    if config.pad_to:
        train, validation = pad_images(train, config.pad_to), pad_images(validation, config.pad_to)
    if config.samples_per_class:
        train = subsample_per_class(train, config.samples_per_class, rng)
    return split_tasks(
        train,
        validation,
        config.num_tasks,
        class_order=config.class_order or None,
        policy=policy_for(config.dataset),
    )


class SequenceResult(NamedTuple):
    records: List[metrics.MetricsRecord]
    checkpoints: List[str]
    activation: Optional[analysis.ActivationChange]
    learner: ContinualLearner


def run_sequence(
    config: RunConfig,
    stream: Optional[TaskStream] = None,
    on_step: Optional[StepCallback] = None,
    on_epoch: Optional[Callable[[int, metrics.MetricsRecord], None]] = None,
    trace: Optional[StepTrace] = None,
) -> SequenceResult:
    """Train the tasks in order, evaluating every seen task after each epoch.

    Writes ``metrics.csv`` after every evaluation, a checkpoint per task,
    ``final.npc``, ``importance.csv`` and, with at least two tasks, the
    activation change between the task-1 and task-2 checkpoints.
    """
    rng = np.random.default_rng(config.seed)
    if stream is None:
        stream = build_stream(config, rng)
    tasks = stream.tasks[: config.max_tasks] if config.max_tasks else stream.tasks
    spec = dataclasses.replace(
        config.model,
        num_classes=stream.num_classes,
        input_shape=tuple(tasks[0].train.images.shape[1:]),
    )
    params = init_params(spec, rng, dtype=config.precision)
    learner = ContinualLearner(spec, params, config.strategy, rng, trace=trace)
    plan = EpochPlan(
        total_train_count=config.total_train_count or stream.total_train_count,
        batch_size=config.batch_size,
    )
    os.makedirs(config.output_dir, exist_ok=True)
    logger.info(
        f"{config.label}: {len(tasks)} tasks, {len(learner.registry)} neurons, "
        f"{plan.steps_per_epoch} steps per epoch"
    )

    records: List[metrics.MetricsRecord] = []
    checkpoints: List[str] = []
    start = time.perf_counter()

    for k, task in enumerate(tasks):

        def _evaluate(epoch: int, k: int = k) -> None:
            accuracies = evaluate(spec, learner.params, tasks[: k + 1])
            wall_ms = int(1000 * (time.perf_counter() - start)) if config.log_wall_time else 0
            record = metrics.MetricsRecord(
                run_id=config.label,
                seed=config.seed,
                strategy=config.strategy.name,
                task=k + 1,
                epoch=epoch + 1,
                accuracies={index + 1: value for index, value in accuracies.items()},
                wall_ms=wall_ms,
            )
            records.append(record)
            metrics.write_metrics_csv(records, config.output_dir)
            logger.info(
                f"{config.label} task {k + 1} epoch {epoch + 1}: "
                f"average accuracy {record.average_accuracy:.4f}"
            )
            if on_epoch is not None:
                on_epoch(learner.step, record)

        learner.train_task(task, plan, config.epochs, stream.policy, on_epoch_end=_evaluate, on_step=on_step)
        learner.end_task(task, config.strategy.importance_samples)
        path = os.path.join(config.output_dir, constants.TASK_CHECKPOINT_FORMAT.format(k + 1))
        learner.save(path, metadata={"strategy": config.strategy.name, "task": k + 1, "seed": config.seed})
        checkpoints.append(path)

    final_path = os.path.join(config.output_dir, constants.FINAL_CHECKPOINT)
    learner.save(final_path, metadata={"strategy": config.strategy.name, "task": len(tasks), "seed": config.seed})
    dump_importance_csv(
        learner.importance, learner.registry, os.path.join(config.output_dir, constants.IMPORTANCE_CSV)
    )

    activation = None
    if len(checkpoints) >= 2:
        probe = analysis.select_probe(tasks[0].validation, config.probe_samples, np.random.default_rng(config.seed))
        activation = analysis.activation_change_analysis(
            checkpoint.load_checkpoint(checkpoints[0]),
            checkpoint.load_checkpoint(checkpoints[1]),
            probe,
        )
        logger.info(
            f"{config.label} activation change: all {activation.mean_all:.4f}, "
            f"top {activation.mean_top:.4f}, bottom {activation.mean_bottom:.4f}"
        )
    metrics.emit_metrics(records, config.output_dir, activation=activation)
    return SequenceResult(records=records, checkpoints=checkpoints + [final_path], activation=activation, learner=learner)
