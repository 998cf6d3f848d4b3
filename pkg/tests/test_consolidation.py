import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plasticity_control import constants, errors
from plasticity_control.consolidation import (
    CpcState,
    EwcStrategy,
    MasStrategy,
    NpcConfig,
    PenaltyState,
    SiAccumulator,
    SiStrategy,
    StrategyConfig,
    build_strategy,
    cpc_importance_and_step,
    ewc_importance,
    finetune_step,
    mas_importance,
    npc_learning_rate,
    npc_step,
    penalty_loss,
    si_fold,
    si_step,
    validate_strategy_parameters,
)
from plasticity_control.importance import ImportanceState, layer_normalize, taylor_raw
from plasticity_control.nn_layers import (
    LayerGroup,
    NeuronRegistry,
    linear,
    masked_cross_entropy,
)
from plasticity_control.tensor_core import Tensor, parameter, relu

DEFAULTS = NpcConfig(alpha=0.1, beta=0.7, eta_max=0.1)


def closed_form(c: float, config: NpcConfig) -> float:
    if c == 0:
        return config.eta_max
    return min(config.eta_max, config.alpha * math.sqrt(max(math.sqrt(config.beta / c) - 1.0, 0.0)))


@pytest.mark.parametrize("config", [DEFAULTS, NpcConfig(alpha=0.01, beta=0.7, eta_max=1.0)])
@pytest.mark.parametrize("fraction", [0.0, 0.25, 1.0, 2.0, 10.0, 0.01])
def test_learning_rate_closed_form(config, fraction):
    c = fraction * config.beta
    assert npc_learning_rate(c, config) == pytest.approx(closed_form(c, config), abs=1e-12)


def test_learning_rate_edges():
    assert npc_learning_rate(0.0, DEFAULTS) == DEFAULTS.eta_max
    assert npc_learning_rate(DEFAULTS.beta, DEFAULTS) == 0.0
    assert npc_learning_rate(1e6, DEFAULTS) == 0.0


def test_learning_rate_tiny_importance_is_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        # beta / 1e-320 overflows float64
        rates = npc_learning_rate(np.array([0.0, 1e-320, 1e-300]), DEFAULTS)
    np.testing.assert_array_equal(rates, DEFAULTS.eta_max)


def test_learning_rate_monotone_on_grid():
    grid = np.linspace(0.0, 5.0, 1000)
    rates = npc_learning_rate(grid, NpcConfig(alpha=0.05, beta=0.7, eta_max=1.0))
    assert np.all(np.diff(rates) <= 0)


@settings(max_examples=100, deadline=None)
@given(
    a=st.floats(0.0, 100.0),
    b=st.floats(0.0, 100.0),
    alpha=st.floats(1e-3, 10.0),
    beta=st.floats(1e-3, 10.0),
    eta_max=st.floats(1e-3, 10.0),
)
def test_learning_rate_non_increasing(a, b, alpha, beta, eta_max):
    config = NpcConfig(alpha=alpha, beta=beta, eta_max=eta_max)
    low, high = sorted((a, b))
    assert npc_learning_rate(low, config) >= npc_learning_rate(high, config)
    assert 0.0 <= npc_learning_rate(low, config) <= eta_max


@pytest.mark.parametrize("field", ["alpha", "beta", "eta_max"])
def test_npc_config_must_be_positive(field):
    with pytest.raises(errors.ConfigurationError):
        NpcConfig(**{field: 0.0})


def test_strategy_parameter_validation():
    validate_strategy_parameters(constants.NPC, ["alpha", "beta", "delta"])
    validate_strategy_parameters(constants.EWC, ["lambda", "learning_rate"])
    with pytest.raises(errors.ConfigurationError, match="lambda"):
        validate_strategy_parameters(constants.NPC, ["lambda"])
    with pytest.raises(errors.ConfigurationError):
        validate_strategy_parameters(constants.FINETUNE, ["alpha"])
    with pytest.raises(errors.ConfigurationError):
        StrategyConfig(name="adam")


# a dense net of at most six neurons: 2 inputs -> 3 hidden -> 3 outputs


def small_net(rng):
    params = {
        "fc1.weight": parameter(rng.normal(size=(3, 2))),
        "fc1.bias": parameter(rng.normal(size=(3,))),
        "output.weight": parameter(rng.normal(size=(3, 3))),
        "output.bias": parameter(rng.normal(size=(3,))),
    }
    registry = NeuronRegistry(
        [
            LayerGroup("fc1", "fc1", ("fc1.weight", "fc1.bias"), 0, 3),
            LayerGroup("output", "logits", ("output.weight", "output.bias"), 3, 6),
        ]
    )
    return params, registry


def small_forward(params, x):
    hidden = relu(linear(Tensor(x), params["fc1.weight"], params["fc1.bias"]))
    logits = linear(hidden, params["output.weight"], params["output.bias"])
    return hidden, logits


def small_backward(params, rng):
    x = rng.normal(size=(4, 2))
    labels = rng.integers(0, 3, size=4)
    hidden, logits = small_forward(params, x)
    masked_cross_entropy(logits, labels, [0, 1, 2]).backward()
    return {"fc1": hidden, "logits": logits}


def test_oracles_over_random_steps(rng):
    params, registry = small_net(rng)
    npc_params = {name: parameter(t.data.copy()) for name, t in params.items()}
    cpc_params = {name: parameter(t.data.copy()) for name, t in params.items()}
    cpc_state = CpcState.zeros(cpc_params, delta=0.3)
    oracle_cpc_c = {name: np.zeros(t.shape) for name, t in params.items()}

    for _ in range(100):
        # taylor criterion against a per-element loop
        taps = small_backward(npc_params, rng)
        hidden, logits = taps["fc1"], taps["logits"]
        for tap in (hidden, logits):
            loop = [
                sum(abs(tap.data[n, u] * tap.grad[n, u]) for n in range(tap.shape[0])) / tap.shape[0]
                for u in range(tap.shape[1])
            ]
            np.testing.assert_allclose(taylor_raw(tap.data, tap.grad), loop, rtol=1e-12, atol=1e-15)

        # npc step against a per-element loop
        importance = rng.random(6)
        before = {name: t.data.copy() for name, t in npc_params.items()}
        npc_step(npc_params, registry, importance, DEFAULTS)
        for group in registry.layers:
            for unit in range(group.size):
                rate = closed_form(importance[group.start + unit], DEFAULTS)
                for name in group.parameters:
                    grad = npc_params[name].grad[unit]
                    expected = before[name][unit] - rate * grad
                    np.testing.assert_allclose(npc_params[name].data[unit], expected, rtol=1e-12, atol=1e-15)

        # cpc step against a per-element loop
        small_backward(cpc_params, rng)
        before = {name: t.data.copy() for name, t in cpc_params.items()}
        grads = {name: t.grad.copy() for name, t in cpc_params.items()}
        cpc_importance_and_step(cpc_params, registry, cpc_state, DEFAULTS)
        for group in registry.layers:
            raws = {name: np.abs(before[name] * grads[name]) for name in group.parameters}
            total = sum(r.sum() for r in raws.values())
            count = sum(r.size for r in raws.values())
            mean = total / count
            for name in group.parameters:
                for index in np.ndindex(before[name].shape):
                    normalized = raws[name][index] / (mean + 1e-12)
                    oracle_cpc_c[name][index] = 0.3 * oracle_cpc_c[name][index] + 0.7 * normalized
                    rate = closed_form(oracle_cpc_c[name][index], DEFAULTS)
                    expected = before[name][index] - rate * grads[name][index]
                    assert cpc_params[name].data[index] == pytest.approx(expected, rel=1e-10, abs=1e-14)
        for name in params:
            np.testing.assert_allclose(cpc_state.C[name], oracle_cpc_c[name], rtol=1e-10, atol=1e-14)


def test_npc_step_checks_importance_shape(rng):
    params, registry = small_net(rng)
    small_backward(params, rng)
    with pytest.raises(errors.StateError):
        npc_step(params, registry, np.zeros(5), DEFAULTS)


def test_pinned_importance_freezes_parameters(rng):
    params, registry = small_net(rng)
    importance = ImportanceState.zeros(len(registry))
    strategy = build_strategy(StrategyConfig(name=constants.NPC, npc=DEFAULTS), registry, params, importance)
    strategy.pin_importance(np.full(len(registry), DEFAULTS.beta))
    before = {name: t.data.copy() for name, t in params.items()}
    for _ in range(5):
        small_backward(params, rng)
        stats = strategy.apply_update(params)
        assert stats["lr_max"] == 0.0
    for name, tensor in params.items():
        assert np.array_equal(tensor.data, before[name])


def test_penalty_loss_and_gradient(rng):
    params, _ = small_net(rng)
    state = PenaltyState(strength=2.5)
    weights = {name: rng.random(t.shape) for name, t in params.items()}
    state.append(params, weights)
    anchor = {name: t.data.copy() for name, t in params.items()}
    for tensor in params.values():
        tensor.data += rng.normal(size=tensor.shape)
    loss = penalty_loss(params, state)
    expected = 2.5 * sum(np.sum(weights[n] * (params[n].data - anchor[n]) ** 2) for n in params)
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    loss.backward()
    for name, tensor in params.items():
        np.testing.assert_allclose(tensor.grad, 2 * 2.5 * weights[name] * (tensor.data - anchor[name]), rtol=1e-12)


def test_penalty_is_zero_at_anchor(rng):
    params, _ = small_net(rng)
    state = PenaltyState(strength=10.0)
    state.append(params, {name: np.ones(t.shape) for name, t in params.items()})
    assert penalty_loss(params, state).item() == 0.0


def _forward_fn(params, x):
    return small_forward(params, x)[1]


def test_ewc_fisher_matches_brute_force(rng):
    params, _ = small_net(rng)
    inputs = rng.normal(size=(3, 2))
    classes = [0, 2]
    fisher = ewc_importance(_forward_fn, params, inputs, classes)
    expected = {name: np.zeros(t.shape) for name, t in params.items()}
    for sample in inputs:
        logits = _forward_fn(params, sample[None]).data[0, classes]
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        for label, prob in zip(classes, probs):
            # fresh graph per label
            loss = masked_cross_entropy(_forward_fn(params, sample[None]), np.array([label]), classes)
            loss.backward()
            for name, tensor in params.items():
                expected[name] += prob * tensor.grad ** 2
    for name in params:
        np.testing.assert_allclose(fisher[name], expected[name] / 3, rtol=1e-10, atol=1e-15)


def test_mas_weights_match_closed_form(rng):
    weight = parameter(rng.normal(size=(3, 2)))
    bias = parameter(rng.normal(size=(3,)))
    params = {"output.weight": weight, "output.bias": bias}
    inputs = rng.normal(size=(4, 2))

    def forward(p, x):
        return linear(Tensor(x), p["output.weight"], p["output.bias"])

    weights = mas_importance(forward, params, inputs, [1, 2])
    expected_w = np.zeros((3, 2))
    expected_b = np.zeros(3)
    for x in inputs:
        out = weight.data @ x + bias.data
        out[0] = 0.0
        expected_w += np.abs(2 * np.outer(out, x))
        expected_b += np.abs(2 * out)
    np.testing.assert_allclose(weights["output.weight"], expected_w / 4, rtol=1e-12)
    np.testing.assert_allclose(weights["output.bias"], expected_b / 4, rtol=1e-12)


def test_importance_estimation_needs_samples(rng):
    params, _ = small_net(rng)
    with pytest.raises(errors.DataError):
        ewc_importance(_forward_fn, params, np.zeros((0, 2)), [0, 1])
    with pytest.raises(errors.DataError):
        mas_importance(_forward_fn, params, np.zeros((0, 2)), [0, 1])


def test_si_path_integral():
    params = {"w": parameter(np.array([1.0, 2.0]))}
    accumulator = SiAccumulator.begin(params, damping=0.5)
    for gradient, step in (([1.0, -1.0], [-0.1, 0.2]), ([2.0, 0.0], [-0.2, 0.0])):
        si_step(accumulator, {"w": np.array(gradient)}, {"w": np.array(step)})
        params["w"].data += np.array(step)
    np.testing.assert_allclose(accumulator.omega["w"], [0.5, 0.2])
    weights = si_fold(accumulator, params)
    np.testing.assert_allclose(weights["w"], [0.5 / (0.09 + 0.5), 0.2 / (0.04 + 0.5)])
    assert np.all(accumulator.omega["w"] == 0)
    np.testing.assert_allclose(accumulator.start["w"], params["w"].data)


def test_si_negative_contributions_are_clipped():
    params = {"w": parameter(np.array([0.0]))}
    accumulator = SiAccumulator.begin(params)
    si_step(accumulator, {"w": np.array([1.0])}, {"w": np.array([1.0])})
    params["w"].data += 1.0
    assert si_fold(accumulator, params)["w"][0] == 0.0


@pytest.mark.parametrize("strategy_class", [EwcStrategy, MasStrategy])
def test_penalty_strategies_keep_one_anchor_per_task(rng, strategy_class):
    params, registry = small_net(rng)
    strategy = strategy_class(registry, learning_rate=0.01, strength=1.0, importance_samples=2)
    assert strategy.regularizer(params) is None
    for task in range(5):
        strategy.begin_task(params)
        small_backward(params, rng)
        strategy.apply_update(params)
        strategy.end_task(params, _forward_fn, rng.normal(size=(4, 2)), [0, 1, 2])
    assert len(strategy.penalty.tasks) == 5
    arrays = strategy.state_arrays()
    assert len(arrays) == 5 * 2 * len(params)
    assert strategy.regularizer(params) is not None


def test_si_strategy_folds_per_task(rng):
    params, registry = small_net(rng)
    strategy = SiStrategy(registry, learning_rate=0.05, strength=0.1, importance_samples=2, damping=1e-3)
    for task in range(3):
        strategy.begin_task(params)
        for _ in range(3):
            small_backward(params, rng)
            strategy.apply_update(params)
        strategy.end_task(params, _forward_fn, rng.normal(size=(2, 2)), [0, 1, 2])
    assert len(strategy.penalty.tasks) == 3
    assert all(np.all(w >= 0) for task in strategy.penalty.tasks for w in task.weights.values())


def test_npc_state_is_one_scalar_per_neuron(rng):
    params, registry = small_net(rng)
    importance = ImportanceState.zeros(len(registry))
    strategy = build_strategy(StrategyConfig(name=constants.NPC), registry, params, importance)
    for _ in range(5):
        strategy.end_task(params, _forward_fn, rng.normal(size=(2, 2)), [0, 1])
    arrays = strategy.state_arrays()
    assert list(arrays) == ["importance"]
    assert arrays["importance"].shape == (len(registry),)


def test_cpc_normalization_runs_over_weights_and_biases(rng):
    params, registry = small_net(rng)
    state = CpcState.zeros(params, delta=0.5)
    small_backward(params, rng)
    raws = np.concatenate(
        [np.abs(params[n].data * params[n].grad).reshape(-1) for n in ("fc1.weight", "fc1.bias")]
    )
    expected = 0.5 * layer_normalize(raws, np.zeros(raws.size, dtype=np.int64))
    cpc_importance_and_step(params, registry, state, DEFAULTS)
    got = np.concatenate([state.C["fc1.weight"].reshape(-1), state.C["fc1.bias"]])
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_cpc_leaves_inactive_neurons_alone(rng):
    params, registry = small_net(rng)
    state = CpcState.zeros(params, delta=0.5)
    small_backward(params, rng)
    active = np.array([True, True, True, True, False, True])
    cpc_importance_and_step(params, registry, state, DEFAULTS, active)
    assert np.all(state.C["output.weight"][1] == 0)
    assert state.C["output.bias"][1] == 0
    live = np.concatenate([state.C["output.weight"][[0, 2]].reshape(-1), state.C["output.bias"][[0, 2]]])
    assert live.mean() == pytest.approx(0.5, abs=1e-9)


def test_finetune_step_is_plain_gradient_descent():
    theta = parameter(np.array([1.0]))
    (theta * theta).sum().backward()
    finetune_step({"theta": theta}, 0.1)
    np.testing.assert_allclose(theta.data, [0.8])
    (theta * theta).sum().backward()
    finetune_step({"theta": theta}, 0.0)
    np.testing.assert_allclose(theta.data, [0.8])


def test_finetune_matches_npc_without_importance(rng):
    params, registry = small_net(rng)
    small_backward(params, rng)
    twin = {name: parameter(t.data.copy()) for name, t in params.items()}
    for name, tensor in twin.items():
        tensor.grad = params[name].grad.copy()
    finetune_step(params, DEFAULTS.eta_max)
    npc_step(twin, registry, np.zeros(len(registry)), DEFAULTS)
    for name in params:
        np.testing.assert_array_equal(params[name].data, twin[name].data)


def _one_neuron(grad):
    params = {"w": parameter(np.array([[1.0, 2.0]]))}
    params["w"].grad = np.array(grad)
    return params, NeuronRegistry([LayerGroup("output", "logits", ("w",), 0, 1)])


def _cpc_and_npc_updates(grad):
    npc_params, registry = _one_neuron(grad)
    cpc_params, _ = _one_neuron(grad)
    # a one-neuron layer normalizes to 1, so C = (1 - delta) after one step
    npc_step(npc_params, registry, np.array([0.5]), DEFAULTS)
    cpc_importance_and_step(cpc_params, registry, CpcState.zeros(cpc_params, delta=0.5), DEFAULTS)
    start = np.array([[1.0, 2.0]])
    return start - npc_params["w"].data, start - cpc_params["w"].data


def test_cpc_matches_npc_for_equal_connection_criteria():
    npc_update, cpc_update = _cpc_and_npc_updates([[0.4, 0.2]])
    np.testing.assert_allclose(cpc_update, npc_update, rtol=1e-12)


def test_cpc_departs_from_npc_for_unequal_connection_criteria():
    npc_update, cpc_update = _cpc_and_npc_updates([[0.4, 0.4]])
    assert cpc_update[0, 0] > npc_update[0, 0]
    assert cpc_update[0, 1] < npc_update[0, 1]
