"""
Change of second-top-layer activations between two checkpoints, related to
the importance each neuron held at the first checkpoint.
"""
import dataclasses
import logging

import numpy as np
import pandas as pd

from plasticity_control import constants, errors
from plasticity_control.checkpoint import Checkpoint
from plasticity_control.datasets import Samples
from plasticity_control.nn_layers import build_registry, model_forward
from plasticity_control.tensor_core import parameter

logger = logging.getLogger(__name__)

IMPORTANCE_KEY = "importance/C"
EXTREME_FRACTION = 0.1

TABLE_COLUMNS = ["neuron_id", "unit", "sample", "importance", "abs_change"]
SUMMARY_COLUMNS = ["neurons", "samples", "mean_all", "mean_top", "mean_bottom"]


@dataclasses.dataclass
class ActivationChange:
    """Per-(neuron, sample) absolute activation change and its summaries.

    Attributes:
        table: one row per neuron and probe sample.
        per_neuron: importance and mean absolute change per neuron.
        mean_all: mean change over every neuron.
        mean_top: mean change over the most important 10% of neurons.
        mean_bottom: mean change over the least important 10%.
    """

    table: pd.DataFrame
    per_neuron: pd.DataFrame
    mean_all: float
    mean_top: float
    mean_bottom: float

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[len(self.per_neuron), self.table["sample"].nunique(), self.mean_all, self.mean_top, self.mean_bottom]],
            columns=SUMMARY_COLUMNS,
        )


def empty_table() -> pd.DataFrame:
    return pd.DataFrame(columns=TABLE_COLUMNS)


def select_probe(samples: Samples, count: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``count`` randomly chosen images, kept in dataset order."""
    if len(samples) == 0:
        raise errors.DataError("no samples to probe")
    index = np.sort(rng.permutation(len(samples))[:count])
    return samples.images[index]


def second_top_activations(checkpoint: Checkpoint, images: np.ndarray) -> np.ndarray:
    """Evaluation-mode activations (N×U) of the last hidden dense layer."""
    params = {name: parameter(values) for name, values in checkpoint.params.items()}
    result = model_forward(checkpoint.spec, params, images.astype(np.float64), training=False)
    return result.taps[constants.SECOND_TOP].data


def activation_change_analysis(
    before: Checkpoint,
    after: Checkpoint,
    probe_images: np.ndarray,
    fraction: float = EXTREME_FRACTION,
) -> ActivationChange:
    """Compare second-top activations of ``before`` and ``after``.

    Raises:
        ConfigurationError: if the checkpoints describe different models.
        StateError: if ``before`` carries no importance values.
    """
    if before.spec != after.spec:
        raise errors.ConfigurationError(
            f"checkpoints describe different models: {before.spec} vs {after.spec}"
        )
    if IMPORTANCE_KEY not in before.state:
        raise errors.StateError("checkpoint holds no neuron importance")
    if len(probe_images) == 0:
        raise errors.DataError("no probe samples")

    registry = build_registry(before.spec)
    group = registry.layer(before.spec.dense_layers[-1])
    importance = before.state[IMPORTANCE_KEY][group.ids]

    change = np.abs(
        second_top_activations(after, probe_images) - second_top_activations(before, probe_images)
    )
    num_samples, num_units = change.shape
    neuron_ids = np.arange(group.start, group.stop)

    table = pd.DataFrame(
        {
            "neuron_id": np.repeat(neuron_ids, num_samples),
            "unit": np.repeat(np.arange(num_units), num_samples),
            "sample": np.tile(np.arange(num_samples), num_units),
            "importance": np.repeat(importance, num_samples),
            "abs_change": change.T.reshape(-1),
        },
        columns=TABLE_COLUMNS,
    )
    mean_change = change.mean(axis=0)
    per_neuron = pd.DataFrame(
        {"neuron_id": neuron_ids, "importance": importance, "mean_abs_change": mean_change}
    )

    count = max(1, int(round(fraction * num_units)))
    order = np.argsort(-importance, kind="stable")
    result = ActivationChange(
        table=table,
        per_neuron=per_neuron,
        mean_all=float(mean_change.mean()),
        mean_top=float(mean_change[order[:count]].mean()),
        mean_bottom=float(mean_change[order[-count:]].mean()),
    )
    logger.debug(f"Activation change over {num_units} neurons and {num_samples} samples")
    return result
