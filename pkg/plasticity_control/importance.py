"""
Per-neuron importance from the Taylor criterion.

Each training step produces a raw criterion per neuron (batch average of
|activation · dL/dactivation|), which is normalized by the arithmetic mean
of its layer and folded into a running value C.
"""
import dataclasses
import logging
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from plasticity_control import constants, errors
from plasticity_control.nn_layers import NeuronRegistry
from plasticity_control.tensor_core import Tensor

logger = logging.getLogger(__name__)

NORMALIZATION_EPS = 1e-12


def taylor_raw(activation: np.ndarray, gradient: Optional[np.ndarray]) -> np.ndarray:
    """Raw Taylor criterion of every neuron feeding one activation tap.

    Dense taps (N×U): mean over the batch of |n · dL/dn|.
    Conv taps (N×F×H×W): per sample, the signed product is averaged over
    all positions of the filter before taking the absolute value; the
    result is then averaged over the batch.

    Raises:
        StateError: if no gradient is available (backward not run).
    """
    if gradient is None:
        raise errors.StateError("no activation gradient: backward not run")
    if gradient.shape != activation.shape:
        raise errors.DimensionError(
            f"activation {activation.shape} and gradient {gradient.shape} differ"
        )
    product = activation.astype(np.float64) * gradient.astype(np.float64)
    if product.ndim > 2:
        product = product.mean(axis=tuple(range(2, product.ndim)))
    return np.abs(product).mean(axis=0)


def registry_raw(taps: Dict[str, Tensor], registry: NeuronRegistry) -> np.ndarray:
    """Concatenated raw criteria in neuron-id order."""
    raws = []
    for group in registry.layers:
        tap = taps[group.tap]
        raws.append(taylor_raw(tap.data, tap.grad))
    return np.concatenate(raws)


def task_neuron_mask(registry: NeuronRegistry, task_classes: Sequence[int]) -> np.ndarray:
    """Neurons a task can train: every hidden unit plus the task's own outputs.

    Output units of other tasks are masked out of the loss and never see a
    gradient, so they take no part in their layer's normalization.
    """
    active = np.ones(len(registry), dtype=bool)
    output = registry.layer(constants.OUTPUT)
    outside = np.setdiff1d(np.arange(output.size), np.asarray(task_classes, dtype=np.int64))
    active[output.start + outside] = False
    return active


def layer_normalize(
    raw: np.ndarray, layer_index: np.ndarray, active: Optional[np.ndarray] = None
) -> np.ndarray:
    """Divide each criterion by the arithmetic mean of its layer (+1e-12).

    With ``active``, only active neurons enter the layer means and inactive
    neurons come back as 0.
    """
    if active is None:
        counts = np.bincount(layer_index)
        means = np.bincount(layer_index, weights=raw) / counts
        return raw / (means[layer_index] + NORMALIZATION_EPS)
    counts = np.bincount(layer_index, weights=active.astype(np.float64))
    sums = np.bincount(layer_index, weights=np.where(active, raw, 0.0), minlength=counts.size)
    means = sums / np.maximum(counts, 1.0)
    return np.where(active, raw / (means[layer_index] + NORMALIZATION_EPS), 0.0)


@dataclasses.dataclass
class ImportanceState:
    """Running per-neuron importance.

    Attributes:
        C: running importance, zero before the first update.
        last_raw: raw criteria of the latest step.
        last_normalized: layer-normalized criteria of the latest step.
        delta: combination coefficient in (0, 1).
        swap_delta: use C <- (1 - delta) C + delta c_bar instead of the
        literal C <- delta C + (1 - delta) c_bar.
        step: number of updates applied.
    """

    C: np.ndarray
    last_raw: np.ndarray
    last_normalized: np.ndarray
    delta: float = 1e-3
    swap_delta: bool = False
    step: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.delta < 1:
            raise errors.ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")

    @classmethod
    def zeros(cls, num_neurons: int, delta: float = 1e-3, swap_delta: bool = False) -> "ImportanceState":
        return cls(
            C=np.zeros(num_neurons),
            last_raw=np.zeros(num_neurons),
            last_normalized=np.zeros(num_neurons),
            delta=delta,
            swap_delta=swap_delta,
        )

    def observe(
        self, raw: np.ndarray, layer_index: np.ndarray, active: Optional[np.ndarray] = None
    ) -> "ImportanceState":
        """Normalize one step's raw criteria and fold them into C.

        Inactive neurons keep their C.
        """
        normalized = layer_normalize(raw, layer_index, active)
        self.last_raw = raw
        return ema_update(self, normalized, active)

    def to_frame(self, registry: NeuronRegistry) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "neuron_id": [r.neuron_id for r in registry],
                "layer": [r.layer for r in registry],
                "C": self.C,
            }
        )


def ema_update(
    state: ImportanceState, normalized: np.ndarray, active: Optional[np.ndarray] = None
) -> ImportanceState:
    """C <- delta C + (1 - delta) c_bar (or the swapped convention) on active neurons."""
    keep = (1.0 - state.delta) if state.swap_delta else state.delta
    updated = keep * state.C + (1.0 - keep) * normalized
    state.C = updated if active is None else np.where(active, updated, state.C)
    state.last_normalized = normalized
    state.step += 1
    return state


def dump_importance_csv(state: ImportanceState, registry: NeuronRegistry, path: str) -> None:
    state.to_frame(registry).to_csv(path, index=False)
    logger.info(f"Importance of {len(registry)} neurons written to {path}")
