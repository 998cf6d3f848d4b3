import logging
import os

import pytest

from plasticity_control import constants, errors, utils


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("seed: 0\n")
    return str(path)


@pytest.mark.parametrize(
    "seeds, expected",
    [(3, [0, 1, 2]), ("1,2,3", [1, 2, 3]), ("[4, 5]", [4, 5]), ("7", [7]), ([2, 9], [2, 9])],
)
def test_process_seed_arguments(seeds, expected):
    assert utils.process_seed_arguments(seeds) == expected


def test_process_seed_arguments_rejects_garbage():
    with pytest.raises(errors.UsageError):
        utils.process_seed_arguments("a,b")


def test_single_experiment(tmp_path, config_path):
    base = [{"training": {"epochs": 1}}]
    experiment_path, path = utils.setup_experiment(
        constants.SINGLE, str(tmp_path / "results"), config_path, base_changes=base
    )
    assert path == os.path.join(experiment_path, constants.SINGLE)
    assert os.path.isfile(os.path.join(experiment_path, "config.yaml"))
    assert utils.json_to_config_changes(os.path.join(path, constants.CONFIG_CHANGES_JSON)) == base


def test_serial_experiment_tree(tmp_path, config_path):
    base = [{"training": {"epochs": 1}}]
    changes = {
        "npc_a": [{"npc": {"alpha": 0.2}}],
        "cpc_a": [{"training": {"strategy": "cpc"}}],
    }
    experiment_path, paths = utils.setup_experiment(
        constants.SERIAL,
        str(tmp_path / "results"),
        config_path,
        config_changes=changes,
        seeds=[0, 1],
        base_changes=base,
        experiment_name="_sweep",
    )
    assert experiment_path.endswith("_sweep")
    assert len(paths) == 4
    leaf = os.path.join(experiment_path, "npc_a", "1")
    assert leaf in paths
    assert utils.json_to_config_changes(os.path.join(leaf, constants.CONFIG_CHANGES_JSON)) == [
        {"training": {"epochs": 1}},
        {"npc": {"alpha": 0.2}},
        {constants.RUN_ID: "npc_a"},
        {constants.SEED: 1},
    ]
    assert utils.json_to_config_changes(
        os.path.join(experiment_path, f"all_{constants.CONFIG_CHANGES_JSON}")
    ) == changes


def test_seeds_without_changes(tmp_path, config_path):
    experiment_path, paths = utils.setup_experiment(constants.SERIAL, str(tmp_path), config_path, seeds=[5])
    assert paths == [os.path.join(experiment_path, constants.SINGLE, "5")]


@pytest.mark.parametrize("mode, seeds", [("grid", [0]), (constants.PARALLEL, None)])
def test_setup_rejects(tmp_path, config_path, mode, seeds):
    with pytest.raises(errors.UsageError):
        utils.setup_experiment(mode, str(tmp_path), config_path, seeds=seeds)


def test_logger_is_not_duplicated(tmp_path):
    first = utils.get_logger(str(tmp_path), "plasticity_test_logger")
    second = utils.get_logger(str(tmp_path), "plasticity_test_logger")
    try:
        assert first is second
        assert len(second.handlers) == 2
        second.info("hello")
        assert os.path.isfile(tmp_path / constants.LOG_FILE_NAME)
    finally:
        for handler in list(second.handlers):
            handler.close()
            second.removeHandler(handler)


def test_package_logging_configured_once():
    utils.configure_package_logging(logging.DEBUG)
    utils.configure_package_logging(logging.DEBUG)
    assert len(logging.getLogger("plasticity_control").handlers) == 1


def test_unknown_seed_package():
    utils.set_random_seeds(0, [constants.NUMPY, constants.RANDOM])
    with pytest.raises(errors.ConfigurationError):
        utils.set_random_seeds(0, ["torch"])
