"""
Convolutional classifier with instance normalization, its losses and the
neuron registry that maps every logical neuron (a conv filter or a dense
unit) to its incoming parameters and its activation tap.

Architecture: for each conv layer, 3×3 same-padded convolution, instance
normalization without affine transform, ReLU, 2×2 max pooling; the
feature maps are flattened channel-major then row-major (numpy C order of
N×C×H×W) into hidden dense layers with ReLU and dropout, and a final
linear output layer spanning the classes of every task.
"""
import dataclasses
import hashlib
import json
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from plasticity_control import constants, errors
from plasticity_control.tensor_core import (
    Tensor,
    as_tensor,
    conv2d,
    conv_output_size,
    matmul,
    maxpool2d,
    parameter,
    relu,
    transpose,
)

WEIGHT = "weight"
BIAS = "bias"


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``dense_widths`` lists the hidden dense layers only; the first dense
    input size (flatten) and the output width (``num_classes``, every task
    head together) are implied.
    """

    conv_channels: Tuple[int, ...] = (64, 256, 128)
    dense_widths: Tuple[int, ...] = (512,)
    num_classes: int = 10
    input_shape: Tuple[int, int, int] = (1, 32, 32)
    dropout_rate: float = 0.2
    kernel_size: int = 3
    pool_size: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.conv_channels or not self.dense_widths:
            raise errors.ConfigurationError("conv_channels and dense_widths must be non-empty")
        if min(self.conv_channels + self.dense_widths) < 1 or self.num_classes < 1:
            raise errors.ConfigurationError("layer widths must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise errors.ConfigurationError(
                f"dropout rate must lie in [0, 1), got {self.dropout_rate}"
            )
        if self.kernel_size % 2 == 0:
            raise errors.ConfigurationError("kernel_size must be odd for same padding")
        if len(self.input_shape) != 3:
            raise errors.ConfigurationError(
                f"input_shape must be (channels, height, width), got {self.input_shape}"
            )
        _ = self.feature_shape

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    @property
    def conv_layers(self) -> List[str]:
        return [f"conv{i + 1}" for i in range(len(self.conv_channels))]

    @property
    def dense_layers(self) -> List[str]:
        return [f"fc{i + 1}" for i in range(len(self.dense_widths))]

    @property
    def layers(self) -> List[str]:
        return self.conv_layers + self.dense_layers + [constants.OUTPUT]

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        _, height, width = self.input_shape
        for _ in self.conv_channels:
            height = conv_output_size(height, self.kernel_size, 1, self.padding)
            width = conv_output_size(width, self.kernel_size, 1, self.padding)
            height, width = height // self.pool_size, width // self.pool_size
            if height == 0 or width == 0:
                raise errors.ConfigurationError(
                    f"input {self.input_shape} too small for {len(self.conv_channels)} pooling stages"
                )
        return (self.conv_channels[-1], height, width)

    @property
    def flatten_size(self) -> int:
        return int(np.prod(self.feature_shape))

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter shapes in registry order."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        in_channels = self.input_shape[0]
        k = self.kernel_size
        for name, channels in zip(self.conv_layers, self.conv_channels):
            shapes[f"{name}.{WEIGHT}"] = (channels, in_channels, k, k)
            shapes[f"{name}.{BIAS}"] = (channels,)
            in_channels = channels
        fan_in = self.flatten_size
        for name, width in zip(self.dense_layers, self.dense_widths):
            shapes[f"{name}.{WEIGHT}"] = (width, fan_in)
            shapes[f"{name}.{BIAS}"] = (width,)
            fan_in = width
        shapes[f"{constants.OUTPUT}.{WEIGHT}"] = (self.num_classes, fan_in)
        shapes[f"{constants.OUTPUT}.{BIAS}"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> Dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelSpec":
        return cls(**values)

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; identifies checkpoints."""
        canonical = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canonical).digest()


def init_params(
    spec: ModelSpec, rng: np.random.Generator, dtype: Union[str, np.dtype] = np.float64
) -> Dict[str, Tensor]:
    """Uniform initialisation over ±sqrt(1 / fan_in) for weights and biases.

    Returns:
        parameters keyed ``<layer>.weight`` / ``<layer>.bias`` in registry order.
    """
    params: Dict[str, Tensor] = {}
    shapes = spec.parameter_shapes()
    for name, shape in shapes.items():
        layer = name.rsplit(".", 1)[0]
        weight_shape = shapes[f"{layer}.{WEIGHT}"]
        bound = np.sqrt(1.0 / int(np.prod(weight_shape[1:])))
        params[name] = parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)
    return params


def instance_norm2d(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial positions.

    No learned scale or shift, so behaviour is identical at train and test
    time. eps guards zero-variance channels (which map to zeros).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise errors.DimensionError(f"instance_norm2d expects N×C×H×W, got {x.shape}")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    centred = x.data - mean
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=(2, 3), keepdims=True) + eps)
    normalized = centred * inv_std
    out = Tensor(normalized.astype(x.dtype), (x,), "instance_norm2d")

    def _backward() -> None:
        gradient = out.grad
        x._accumulate(
            inv_std
            * (
                gradient
                - gradient.mean(axis=(2, 3), keepdims=True)
                - normalized * (gradient * normalized).mean(axis=(2, 3), keepdims=True)
            )
        )

    out._backward = _backward
    return out


def dropout(
    x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout: keep with probability 1 - rate, scale by 1 / (1 - rate)."""
    if not training or rate == 0:
        return x
    if rng is None:
        raise errors.ConfigurationError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) < (1.0 - rate)
    return x * (keep / (1.0 - rate)).astype(x.dtype)


def _task_columns(task_classes: Sequence[int], num_outputs: int) -> np.ndarray:
    columns = np.array(sorted(set(int(c) for c in task_classes)), dtype=np.int64)
    if columns.size == 0 or columns.min() < 0 or columns.max() >= num_outputs:
        raise errors.DataError(
            f"task classes {list(columns)} do not fit {num_outputs} outputs"
        )
    return columns


def masked_cross_entropy(
    logits: Tensor, labels: np.ndarray, task_classes: Sequence[int]
) -> Tensor:
    """Mean negative log-likelihood with softmax restricted to the task's outputs.

    Logits outside ``task_classes`` receive exactly zero gradient.

    Raises:
        DataError: if a label is not one of the task's classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    columns = _task_columns(task_classes, logits.shape[1])
    position = np.searchsorted(columns, labels)
    position = np.clip(position, 0, columns.size - 1)
    outside = columns[position] != labels
    if np.any(outside):
        raise errors.DataError(
            f"labels {sorted(set(labels[outside].tolist()))} outside task classes {columns.tolist()}"
        )
    batch = labels.shape[0]
    subset = logits.data[:, columns].astype(np.float64)
    shifted = subset - subset.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(batch), position].mean()
    out = Tensor(np.array(loss, dtype=logits.dtype), (logits,), "masked_cross_entropy")

    def _backward() -> None:
        probs = np.exp(log_probs)
        probs[np.arange(batch), position] -= 1.0
        gradient = np.zeros_like(logits.data)
        gradient[:, columns] = (probs / batch * out.grad).astype(logits.dtype)
        logits._accumulate(gradient)

    out._backward = _backward
    return out


def masked_predictions(logits: np.ndarray, task_classes: Sequence[int]) -> np.ndarray:
    """Argmax over the task's own outputs, returned as class indices."""
    columns = _task_columns(task_classes, logits.shape[1])
    return columns[np.argmax(logits[:, columns], axis=1)]


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return matmul(x, transpose(weight)) + bias


class ForwardResult(NamedTuple):
    logits: Tensor
    taps: Dict[str, Tensor]


def model_forward(
    spec: ModelSpec,
    params: Dict[str, Tensor],
    x: Union[np.ndarray, Tensor],
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForwardResult:
    """Run the classifier.

    Args:
        spec: architecture.
        params: parameters as produced by ``init_params``.
        x: batch of shape N×C×H×W matching ``spec.input_shape``.
        training: enables dropout.
        rng: generator for dropout masks (required when training).

    Returns:
        logits over all classes, and taps keyed by layer name holding every
        post-ReLU activation plus ``second_top`` (last hidden dense layer)
        and ``logits``.

    Raises:
        DimensionError: if x does not match the input shape.
    """
    x = as_tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise errors.DimensionError(
            f"input shape {x.shape} does not match N×{spec.input_shape}"
        )
    taps: Dict[str, Tensor] = {}
    hidden = x
    for name in spec.conv_layers:
        hidden = conv2d(
            hidden,
            params[f"{name}.{WEIGHT}"],
            params[f"{name}.{BIAS}"],
            stride=1,
            padding=spec.padding,
        )
        hidden = relu(instance_norm2d(hidden, eps=spec.norm_eps))
        taps[name] = hidden
        hidden = maxpool2d(hidden, window=spec.pool_size)
    hidden = hidden.reshape(hidden.shape[0], spec.flatten_size)
    for name in spec.dense_layers:
        hidden = relu(linear(hidden, params[f"{name}.{WEIGHT}"], params[f"{name}.{BIAS}"]))
        taps[name] = hidden
        hidden = dropout(hidden, spec.dropout_rate, training, rng)
    taps[constants.SECOND_TOP] = taps[spec.dense_layers[-1]]
    logits = linear(
        hidden,
        params[f"{constants.OUTPUT}.{WEIGHT}"],
        params[f"{constants.OUTPUT}.{BIAS}"],
    )
    taps[constants.LOGITS] = logits
    return ForwardResult(logits=logits, taps=taps)


@dataclasses.dataclass(frozen=True)
class ParameterSlice:
    """Slice ``index`` along the leading axis of parameter ``parameter``."""

    parameter: str
    index: int


@dataclasses.dataclass(frozen=True)
class NeuronRecord:
    neuron_id: int
    layer: str
    unit: int
    slices: Tuple[ParameterSlice, ...]
    tap: str


@dataclasses.dataclass(frozen=True)
class LayerGroup:
    """Contiguous block of neuron ids belonging to one layer."""

    name: str
    tap: str
    parameters: Tuple[str, ...]
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def ids(self) -> slice:
        return slice(self.start, self.stop)


class NeuronRegistry:
    """Maps each neuron to its incoming parameter slices and activation tap.

    The incoming slices of all neurons partition the model's parameters:
    neuron ``u`` of a layer owns row/filter ``u`` of the layer's weight and
    element ``u`` of its bias.
    """

    def __init__(self, layers: Sequence[LayerGroup]) -> None:
        self.layers: List[LayerGroup] = list(layers)
        self.records: List[NeuronRecord] = []
        for group in self.layers:
            for unit in range(group.size):
                self.records.append(
                    NeuronRecord(
                        neuron_id=group.start + unit,
                        layer=group.name,
                        unit=unit,
                        slices=tuple(ParameterSlice(p, unit) for p in group.parameters),
                        tap=group.tap,
                    )
                )
        self.layer_index = np.concatenate(
            [np.full(group.size, i, dtype=np.int64) for i, group in enumerate(self.layers)]
        )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[NeuronRecord]:
        return iter(self.records)

    def layer(self, name: str) -> LayerGroup:
        for group in self.layers:
            if group.name == name:
                return group
        raise KeyError(name)

    @property
    def parameter_names(self) -> List[str]:
        return [p for group in self.layers for p in group.parameters]

    def coverage(self, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        """Number of neurons whose incoming slices contain each parameter element."""
        counts = {name: np.zeros(t.shape, dtype=np.int64) for name, t in params.items()}
        for record in self.records:
            for piece in record.slices:
                counts[piece.parameter][piece.index] += 1
        return counts


def build_registry(spec: ModelSpec, params: Optional[Dict[str, Tensor]] = None) -> NeuronRegistry:
    """Registry for ``spec``; output units are neurons too.

    Raises:
        StateError: if materialized params disagree with the spec's shapes.
    """
    shapes = spec.parameter_shapes()
    if params is not None:
        for name, shape in shapes.items():
            if name not in params or tuple(params[name].shape) != shape:
                raise errors.StateError(f"parameter {name} missing or not of shape {shape}")
    widths = list(spec.conv_channels) + list(spec.dense_widths) + [spec.num_classes]
    taps = spec.conv_layers + spec.dense_layers + [constants.LOGITS]
    groups = []
    start = 0
    for name, tap, width in zip(spec.layers, taps, widths):
        groups.append(
            LayerGroup(
                name=name,
                tap=tap,
                parameters=(f"{name}.{WEIGHT}", f"{name}.{BIAS}"),
                start=start,
                stop=start + width,
            )
        )
        start += width
    return NeuronRegistry(groups)
