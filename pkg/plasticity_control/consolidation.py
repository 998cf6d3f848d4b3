"""
Turning importance into parameter updates.

Plasticity control (NPC per neuron, CPC per connection) scales the SGD
step of each unit by a learning rate derived from its importance; the
quadratic-penalty baselines (EWC, MAS, SI) instead anchor parameters to
their values at the end of each task, and fine-tuning is plain SGD.
"""
import abc
import dataclasses
import logging
import re
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from plasticity_control import constants, errors
from plasticity_control.importance import ImportanceState, layer_normalize
from plasticity_control.nn_layers import NeuronRegistry, masked_cross_entropy
from plasticity_control.tensor_core import Tensor, zero_grad

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]
ForwardFn = Callable[[Params, np.ndarray], Tensor]

# command line parameters each strategy accepts
STRATEGY_PARAMETERS = {
    constants.NPC: {constants.ALPHA, constants.BETA, constants.ETA_MAX},
    constants.CPC: {constants.ALPHA, constants.BETA, constants.ETA_MAX},
    constants.EWC: {"lambda", constants.LEARNING_RATE},
    constants.MAS: {"lambda", constants.LEARNING_RATE},
    constants.SI: {"lambda", constants.LEARNING_RATE, constants.SI_DAMPING},
    constants.FINETUNE: {constants.LEARNING_RATE},
}
# importance is tracked for every strategy
SHARED_PARAMETERS = {constants.DELTA, constants.SWAP_DELTA}


def validate_strategy_parameters(strategy: str, given: Iterable[str]) -> None:
    """Reject parameters that have no meaning for ``strategy``.

    Raises:
        ConfigurationError: naming the first offending parameter.
    """
    if strategy not in STRATEGY_PARAMETERS:
        raise errors.ConfigurationError(
            f"unknown strategy {strategy!r}; expected one of {constants.STRATEGIES}"
        )
    allowed = STRATEGY_PARAMETERS[strategy] | SHARED_PARAMETERS
    for name in given:
        if name not in allowed:
            raise errors.ConfigurationError(f"{name} is not a parameter of strategy {strategy}")


@dataclasses.dataclass(frozen=True)
class NpcConfig:
    alpha: float = 0.1
    beta: float = 0.7
    eta_max: float = 0.1

    def __post_init__(self) -> None:
        for name in (constants.ALPHA, constants.BETA, constants.ETA_MAX):
            if not getattr(self, name) > 0:
                raise errors.ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")


def npc_learning_rate(importance: Union[float, np.ndarray], config: NpcConfig) -> np.ndarray:
    """eta = min(eta_max, alpha * sqrt(max(sqrt(beta / C) - 1, 0))).

    C = 0 diverges and is clamped to eta_max; C >= beta gives 0.
    """
    importance = np.asarray(importance, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.sqrt(config.beta / importance)
    rates = config.alpha * np.sqrt(np.maximum(ratio - 1.0, 0.0))
    return np.minimum(config.eta_max, rates)


def _leading_axis(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1))


def npc_step(
    params: Params, registry: NeuronRegistry, importance: np.ndarray, config: NpcConfig
) -> np.ndarray:
    """Update every incoming slice of each neuron with that neuron's rate.

    Args:
        params: parameters with populated gradients, updated in place.
        registry: neuron to parameter-slice mapping.
        importance: per-neuron C in neuron-id order.
        config: learning-rate law.

    Returns:
        per-neuron learning rates.

    Raises:
        StateError: if registry and parameters disagree.
    """
    if importance.shape != (len(registry),):
        raise errors.StateError(
            f"importance has shape {importance.shape}, registry has {len(registry)} neurons"
        )
    rates = npc_learning_rate(importance, config)
    for group in registry.layers:
        layer_rates = rates[group.ids]
        for name in group.parameters:
            tensor = params.get(name)
            if tensor is None or tensor.shape[0] != group.size:
                raise errors.StateError(f"parameter {name} does not match layer {group.name}")
            if tensor.grad is None:
                raise errors.StateError(f"parameter {name} has no gradient")
            step = _leading_axis(layer_rates, tensor.ndim) * tensor.grad
            tensor.data -= step.astype(tensor.dtype)
    return rates


def finetune_step(params: Params, learning_rate: float) -> None:
    """theta <- theta - lr * g for every parameter."""
    for tensor in params.values():
        if tensor.grad is not None:
            tensor.data -= (learning_rate * tensor.grad).astype(tensor.dtype)


@dataclasses.dataclass
class CpcState:
    """Per-connection counterpart of ImportanceState."""

    C: Dict[str, np.ndarray]
    delta: float = 1e-3
    swap_delta: bool = False
    step: int = 0

    @classmethod
    def zeros(cls, params: Params, delta: float = 1e-3, swap_delta: bool = False) -> "CpcState":
        return cls(
            C={name: np.zeros(t.shape) for name, t in params.items()},
            delta=delta,
            swap_delta=swap_delta,
        )


def cpc_importance_and_step(
    params: Params,
    registry: NeuronRegistry,
    state: CpcState,
    config: NpcConfig,
    active: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Connection-level plasticity control step.

    The raw criterion |theta * dL/dtheta| of each parameter is normalized by
    the arithmetic mean over its layer's parameters (weights and biases),
    folded into the running C and mapped to a per-parameter rate. With a
    per-neuron ``active`` mask, the incoming parameters of inactive neurons
    stay out of the mean and keep their C.

    Returns:
        per-parameter learning rates keyed by parameter name.
    """
    keep = (1.0 - state.delta) if state.swap_delta else state.delta
    rates: Dict[str, np.ndarray] = {}
    for group in registry.layers:
        raws, masks = [], []
        for name in group.parameters:
            tensor = params[name]
            if tensor.grad is None:
                raise errors.StateError(f"parameter {name} has no gradient")
            raws.append(np.abs(tensor.data.astype(np.float64) * tensor.grad).reshape(-1))
            rows = np.ones(group.size, dtype=bool) if active is None else active[group.ids]
            masks.append(np.broadcast_to(_leading_axis(rows, tensor.ndim), tensor.shape).reshape(-1))
        flat = np.concatenate(raws)
        mask = np.concatenate(masks)
        normalized = layer_normalize(flat, np.zeros(flat.size, dtype=np.int64), mask)
        offset = 0
        for name in group.parameters:
            tensor = params[name]
            size = tensor.data.size
            piece = normalized[offset : offset + size].reshape(tensor.shape)
            live = mask[offset : offset + size].reshape(tensor.shape)
            offset += size
            updated = keep * state.C[name] + (1.0 - keep) * piece
            state.C[name] = np.where(live, updated, state.C[name])
            rates[name] = npc_learning_rate(state.C[name], config)
            tensor.data -= (rates[name] * tensor.grad).astype(tensor.dtype)
    state.step += 1
    return rates


@dataclasses.dataclass
class TaskAnchor:
    """Parameters at the end of one task and their importance weights."""

    anchor: Dict[str, np.ndarray]
    weights: Dict[str, np.ndarray]


@dataclasses.dataclass
class PenaltyState:
    strength: float
    tasks: List[TaskAnchor] = dataclasses.field(default_factory=list)

    def append(self, params: Params, weights: Dict[str, np.ndarray]) -> None:
        self.tasks.append(
            TaskAnchor(
                anchor={name: t.data.copy() for name, t in params.items()},
                weights={name: np.asarray(w, dtype=np.float64).copy() for name, w in weights.items()},
            )
        )


def penalty_loss(params: Params, state: PenaltyState) -> Tensor:
    """lambda * sum_k sum_i W_{i,k} (theta_i - theta_{i,k})^2, differentiable."""
    dtype = next(iter(params.values())).dtype if params else np.float64
    total: Tensor = Tensor(np.zeros((), dtype=dtype))
    for task in state.tasks:
        for name, tensor in params.items():
            difference = tensor - task.anchor[name].astype(dtype)
            total = total + (difference * difference * task.weights[name].astype(dtype)).sum()
    return total * state.strength


def _require_samples(inputs: np.ndarray) -> None:
    if len(inputs) == 0:
        raise errors.DataError("importance estimation needs at least one sample")


def _zero_like(params: Params) -> Dict[str, np.ndarray]:
    return {name: np.zeros(t.shape) for name, t in params.items()}


def ewc_importance(
    forward_fn: ForwardFn, params: Params, inputs: np.ndarray, task_classes: Sequence[int]
) -> Dict[str, np.ndarray]:
    """Fisher diagonal under the model's own predictive distribution.

    W_i = mean_x sum_y p(y|x) (d log p(y|x) / d theta_i)^2 with the softmax
    restricted to the task's outputs.
    """
    _require_samples(inputs)
    fisher = _zero_like(params)
    classes = sorted(task_classes)
    for sample in inputs:
        logits = forward_fn(params, sample[None])
        subset = logits.data[0, classes].astype(np.float64)
        probs = np.exp(subset - subset.max())
        probs /= probs.sum()
        for label, prob in zip(classes, probs):
            # -log p(y|x); squaring removes the sign. Each backward resets
            # the shared graph's gradients.
            loss = masked_cross_entropy(logits, np.array([label]), classes)
            zero_grad(list(params.values()))
            loss.backward()
            for name, tensor in params.items():
                if tensor.grad is not None:
                    fisher[name] += prob * tensor.grad.astype(np.float64) ** 2
    return {name: value / len(inputs) for name, value in fisher.items()}


def mas_importance(
    forward_fn: ForwardFn, params: Params, inputs: np.ndarray, task_classes: Sequence[int]
) -> Dict[str, np.ndarray]:
    """W_i = mean_x |d ||f(x)||^2 / d theta_i| over the task's outputs."""
    _require_samples(inputs)
    weights = _zero_like(params)
    for sample in inputs:
        logits = forward_fn(params, sample[None])
        mask = np.zeros(logits.shape, dtype=logits.dtype)
        mask[:, list(task_classes)] = 1
        head = logits * mask
        zero_grad(list(params.values()))
        (head * head).sum().backward()
        for name, tensor in params.items():
            if tensor.grad is not None:
                weights[name] += np.abs(tensor.grad.astype(np.float64))
    return {name: value / len(inputs) for name, value in weights.items()}


@dataclasses.dataclass
class SiAccumulator:
    """Running path integral of the loss change per parameter."""

    omega: Dict[str, np.ndarray]
    start: Dict[str, np.ndarray]
    damping: float = 1e-3

    @classmethod
    def begin(cls, params: Params, damping: float = 1e-3) -> "SiAccumulator":
        return cls(
            omega=_zero_like(params),
            start={name: t.data.astype(np.float64).copy() for name, t in params.items()},
            damping=damping,
        )


def si_step(
    accumulator: SiAccumulator, grads: Dict[str, np.ndarray], param_step: Dict[str, np.ndarray]
) -> None:
    """omega += -g * delta_theta."""
    for name, gradient in grads.items():
        accumulator.omega[name] -= gradient * param_step[name]


def si_fold(accumulator: SiAccumulator, params: Params) -> Dict[str, np.ndarray]:
    """W = max(omega, 0) / (total displacement^2 + xi); resets for the next task."""
    weights = {}
    for name, tensor in params.items():
        current = tensor.data.astype(np.float64)
        displacement = current - accumulator.start[name]
        weights[name] = np.maximum(accumulator.omega[name], 0.0) / (
            displacement ** 2 + accumulator.damping
        )
        accumulator.omega[name] = np.zeros_like(accumulator.omega[name])
        accumulator.start[name] = current.copy()
    return weights


@dataclasses.dataclass(frozen=True)
class StrategyConfig:
    """Tagged strategy configuration; ``name`` selects the fields in use."""

    name: str = constants.NPC
    npc: NpcConfig = dataclasses.field(default_factory=NpcConfig)
    delta: float = 1e-3
    swap_delta: bool = False
    learning_rate: float = 0.05
    penalty_strength: float = 100.0
    si_damping: float = 1e-3
    importance_samples: int = 256

    def __post_init__(self) -> None:
        if self.name not in constants.STRATEGIES:
            raise errors.ConfigurationError(
                f"unknown strategy {self.name!r}; expected one of {constants.STRATEGIES}"
            )
        if self.learning_rate < 0 or self.penalty_strength < 0 or self.si_damping <= 0:
            raise errors.ConfigurationError("learning rate, penalty strength and damping must be non-negative")


def _rate_summary(rates: np.ndarray) -> Dict[str, float]:
    return {
        "lr_min": float(rates.min()),
        "lr_mean": float(rates.mean()),
        "lr_max": float(rates.max()),
    }


class ConsolidationStrategy(abc.ABC):
    """Strategy interface used by the trainer.

    Per step the trainer calls ``regularizer`` before backward and
    ``apply_update`` after the importance update; ``begin_task`` and
    ``end_task`` bracket each task. ``active_neurons`` is the per-neuron
    mask of the current task (None means every neuron).
    """

    name: str = ""

    def __init__(self, registry: NeuronRegistry) -> None:
        self._registry = registry
        self._last_rates = np.zeros(1)
        self.active_neurons: Optional[np.ndarray] = None

    def begin_task(self, params: Params) -> None:
        pass

    def regularizer(self, params: Params) -> Optional[Tensor]:
        return None

    @abc.abstractmethod
    def apply_update(self, params: Params) -> Dict[str, float]:
        """Apply one parameter update from populated gradients."""

    def end_task(
        self, params: Params, forward_fn: ForwardFn, inputs: np.ndarray, task_classes: Sequence[int]
    ) -> None:
        pass

    def diagnostics(self) -> Dict[str, float]:
        return _rate_summary(self._last_rates)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        pass


class NpcStrategy(ConsolidationStrategy):
    """Neuron-level plasticity control; its only state is one C per neuron."""

    name = constants.NPC

    def __init__(self, registry: NeuronRegistry, importance: ImportanceState, config: NpcConfig) -> None:
        super().__init__(registry)
        self._importance = importance
        self._config = config
        self._pinned: Optional[np.ndarray] = None

    def pin_importance(self, values: Optional[np.ndarray]) -> None:
        """Use fixed importance values for the rates (None to unpin)."""
        self._pinned = None if values is None else np.asarray(values, dtype=np.float64)

    def apply_update(self, params: Params) -> Dict[str, float]:
        importance = self._importance.C if self._pinned is None else self._pinned
        self._last_rates = npc_step(params, self._registry, importance, self._config)
        return _rate_summary(self._last_rates)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {"importance": self._importance.C}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self._importance.C = np.asarray(arrays["importance"], dtype=np.float64).copy()


class CpcStrategy(ConsolidationStrategy):
    """Connection-level plasticity control; one C per parameter."""

    name = constants.CPC

    def __init__(
        self, registry: NeuronRegistry, params: Params, config: NpcConfig, delta: float, swap_delta: bool
    ) -> None:
        super().__init__(registry)
        self._config = config
        self._state = CpcState.zeros(params, delta=delta, swap_delta=swap_delta)

    @property
    def state(self) -> CpcState:
        return self._state

    def apply_update(self, params: Params) -> Dict[str, float]:
        rates = cpc_importance_and_step(
            params, self._registry, self._state, self._config, self.active_neurons
        )
        self._last_rates = np.concatenate([r.reshape(-1) for r in rates.values()])
        return _rate_summary(self._last_rates)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"cpc/{name}": value for name, value in self._state.C.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for key, value in arrays.items():
            self._state.C[key.split("/", 1)[1]] = np.asarray(value, dtype=np.float64).copy()


class FinetuneStrategy(ConsolidationStrategy):
    name = constants.FINETUNE

    def __init__(self, registry: NeuronRegistry, learning_rate: float) -> None:
        super().__init__(registry)
        self._learning_rate = learning_rate
        self._last_rates = np.array([learning_rate])

    def apply_update(self, params: Params) -> Dict[str, float]:
        finetune_step(params, self._learning_rate)
        return _rate_summary(self._last_rates)


_ANCHOR_KEY = re.compile(r"task(\d+)/(anchor|weights)/(.+)")


class PenaltyStrategy(FinetuneStrategy):
    """SGD on task loss plus the quadratic anchor penalty.

    One anchor/weight set is appended per completed task.
    """

    def __init__(
        self, registry: NeuronRegistry, learning_rate: float, strength: float, importance_samples: int
    ) -> None:
        super().__init__(registry, learning_rate)
        self._penalty = PenaltyState(strength=strength)
        self._importance_samples = importance_samples

    @property
    def penalty(self) -> PenaltyState:
        return self._penalty

    def regularizer(self, params: Params) -> Optional[Tensor]:
        if not self._penalty.tasks:
            return None
        return penalty_loss(params, self._penalty)

    @abc.abstractmethod
    def _task_weights(
        self, params: Params, forward_fn: ForwardFn, inputs: np.ndarray, task_classes: Sequence[int]
    ) -> Dict[str, np.ndarray]:
        pass

    def end_task(
        self, params: Params, forward_fn: ForwardFn, inputs: np.ndarray, task_classes: Sequence[int]
    ) -> None:
        weights = self._task_weights(params, forward_fn, inputs[: self._importance_samples], task_classes)
        self._penalty.append(params, weights)
        logger.info(
            f"{self.name}: anchored task {len(self._penalty.tasks)}, "
            f"mean weight {np.mean([w.mean() for w in weights.values()]):.4e}"
        )

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for k, task in enumerate(self._penalty.tasks):
            for name in task.anchor:
                arrays[f"task{k}/anchor/{name}"] = task.anchor[name]
                arrays[f"task{k}/weights/{name}"] = task.weights[name]
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        tasks: Dict[int, TaskAnchor] = {}
        for key, value in arrays.items():
            match = _ANCHOR_KEY.fullmatch(key)
            if match is None:
                continue
            index, kind, name = int(match.group(1)), match.group(2), match.group(3)
            task = tasks.setdefault(index, TaskAnchor(anchor={}, weights={}))
            getattr(task, kind)[name] = np.asarray(value).copy()
        self._penalty.tasks = [tasks[k] for k in sorted(tasks)]


class EwcStrategy(PenaltyStrategy):
    name = constants.EWC

    def _task_weights(self, params, forward_fn, inputs, task_classes):
        return ewc_importance(forward_fn, params, inputs, task_classes)


class MasStrategy(PenaltyStrategy):
    name = constants.MAS

    def _task_weights(self, params, forward_fn, inputs, task_classes):
        return mas_importance(forward_fn, params, inputs, task_classes)


class SiStrategy(PenaltyStrategy):
    name = constants.SI

    def __init__(
        self,
        registry: NeuronRegistry,
        learning_rate: float,
        strength: float,
        importance_samples: int,
        damping: float,
    ) -> None:
        super().__init__(registry, learning_rate, strength, importance_samples)
        self._damping = damping
        self._accumulator: Optional[SiAccumulator] = None

    def begin_task(self, params: Params) -> None:
        self._accumulator = SiAccumulator.begin(params, damping=self._damping)

    def apply_update(self, params: Params) -> Dict[str, float]:
        if self._accumulator is None:
            self.begin_task(params)
        before = {name: t.data.astype(np.float64) for name, t in params.items()}
        grads = {name: t.grad.astype(np.float64) for name, t in params.items() if t.grad is not None}
        summary = super().apply_update(params)
        si_step(
            self._accumulator,
            grads,
            {name: params[name].data.astype(np.float64) - before[name] for name in grads},
        )
        return summary

    def _task_weights(self, params, forward_fn, inputs, task_classes):
        if self._accumulator is None:
            self.begin_task(params)
        return si_fold(self._accumulator, params)


def build_strategy(
    config: StrategyConfig, registry: NeuronRegistry, params: Params, importance: ImportanceState
) -> ConsolidationStrategy:
    """Instantiate the strategy selected by ``config.name``."""
    if config.name == constants.NPC:
        return NpcStrategy(registry, importance, config.npc)
    if config.name == constants.CPC:
        return CpcStrategy(registry, params, config.npc, config.delta, config.swap_delta)
    if config.name == constants.EWC:
        return EwcStrategy(registry, config.learning_rate, config.penalty_strength, config.importance_samples)
    if config.name == constants.MAS:
        return MasStrategy(registry, config.learning_rate, config.penalty_strength, config.importance_samples)
    if config.name == constants.SI:
        return SiStrategy(
            registry,
            config.learning_rate,
            config.penalty_strength,
            config.importance_samples,
            config.si_damping,
        )
    return FinetuneStrategy(registry, config.learning_rate)
