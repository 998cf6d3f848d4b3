import dataclasses

import numpy as np
import pytest

from plasticity_control import errors
from plasticity_control.analysis import (
    IMPORTANCE_KEY,
    TABLE_COLUMNS,
    activation_change_analysis,
    second_top_activations,
    select_probe,
)
from plasticity_control.checkpoint import Checkpoint
from plasticity_control.nn_layers import ModelSpec, build_registry, init_params

SPEC = ModelSpec(conv_channels=(2,), dense_widths=(10,), num_classes=4, input_shape=(1, 4, 4), dropout_rate=0.0)
UNITS = 10


@pytest.fixture
def before(rng):
    params = {name: t.data for name, t in init_params(SPEC, rng).items()}
    # every second-top unit active on every probe
    params["fc1.bias"] = np.full(UNITS, 50.0)
    importance = np.zeros(len(build_registry(SPEC)))
    importance[build_registry(SPEC).layer("fc1").ids] = np.arange(UNITS)
    return Checkpoint(spec=SPEC, params=params, state={IMPORTANCE_KEY: importance}, metadata={})


@pytest.fixture
def probe(rng):
    return rng.random((5, 1, 4, 4))


def _shifted(checkpoint, shift):
    params = dict(checkpoint.params)
    params["fc1.bias"] = checkpoint.params["fc1.bias"] + shift
    return dataclasses.replace(checkpoint, params=params)


def test_identical_checkpoints_show_no_change(before, probe):
    result = activation_change_analysis(before, before, probe)
    assert np.all(result.table["abs_change"] == 0)
    assert result.mean_all == result.mean_top == result.mean_bottom == 0.0


def test_table_layout(before, probe):
    result = activation_change_analysis(before, _shifted(before, 1.0), probe)
    assert list(result.table.columns) == TABLE_COLUMNS
    assert len(result.table) == UNITS * len(probe)
    fc1 = build_registry(SPEC).layer("fc1")
    assert sorted(result.table["neuron_id"].unique()) == list(range(fc1.start, fc1.stop))
    np.testing.assert_allclose(result.table["abs_change"], 1.0, rtol=1e-9)
    summary = result.summary_frame()
    assert summary[["neurons", "samples"]].values.tolist() == [[UNITS, len(probe)]]


def test_top_and_bottom_follow_importance(before, probe):
    # unit u moves by u + 1; importance of unit u is u
    result = activation_change_analysis(before, _shifted(before, np.arange(1.0, UNITS + 1)), probe)
    assert result.mean_top == pytest.approx(10.0)
    assert result.mean_bottom == pytest.approx(1.0)
    assert result.mean_all == pytest.approx(5.5)
    np.testing.assert_allclose(result.per_neuron["mean_abs_change"], np.arange(1.0, UNITS + 1), rtol=1e-9)


def test_rejects_different_models(before, probe):
    other = ModelSpec(conv_channels=(3,), dense_widths=(10,), num_classes=4, input_shape=(1, 4, 4))
    with pytest.raises(errors.ConfigurationError):
        activation_change_analysis(before, dataclasses.replace(before, spec=other), probe)


def test_needs_importance(before, probe):
    with pytest.raises(errors.StateError):
        activation_change_analysis(dataclasses.replace(before, state={}), before, probe)


def test_needs_probe(before):
    with pytest.raises(errors.DataError):
        activation_change_analysis(before, before, np.zeros((0, 1, 4, 4)))


def test_second_top_activations_shape(before, probe):
    assert second_top_activations(before, probe).shape == (5, UNITS)


def test_select_probe(rng, make_stream):
    validation = make_stream()[0].validation
    probe = select_probe(validation, 3, rng)
    assert probe.shape == (3,) + validation.images.shape[1:]
    assert len(select_probe(validation, 100, rng)) == len(validation)
    with pytest.raises(errors.DataError):
        select_probe(validation.select(np.array([], dtype=np.int64)), 3, rng)
