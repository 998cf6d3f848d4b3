import glob
import os

import pandas as pd
import pytest

pytest.importorskip("config_manager")
pytest.importorskip("data_logger")
pytest.importorskip("plotter")

from plasticity_control import cli, constants, errors  # noqa: E402


@pytest.fixture(autouse=True)
def no_data_env(monkeypatch):
    monkeypatch.delenv(constants.DATA_DIR_ENV, raising=False)


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["train", "--bogus"],
        ["train", "--strategy", "npc", "--lambda", "1"],
        ["train", "--strategy", "ewc", "--alpha", "0.1"],
        ["train", "--strategy", "npc", "--learning-rate", "0.1"],
        ["train", "--config", "absent.yaml"],
    ],
)
def test_usage_errors_exit_one(argv):
    assert cli.main(argv) == constants.EXIT_USAGE


def test_missing_data_directory_exits_two(tmp_path):
    assert cli.main(["train", "--data-dir", str(tmp_path / "absent")]) == constants.EXIT_DATA
    assert cli.main(["train"]) == constants.EXIT_DATA


def test_sweep_changes():
    assert cli.sweep_changes(constants.EWC, cli.LAMBDA, [0.1, 10.0]) == {
        "ewc_lambda_0.1": [{constants.PENALTY: {constants.EWC_LAMBDA: 0.1}}],
        "ewc_lambda_10": [{constants.PENALTY: {constants.EWC_LAMBDA: 10.0}}],
    }
    assert cli.sweep_changes(constants.NPC, constants.ALPHA, [0.01]) == {
        "npc_alpha_0.01": [{constants.NPC_SECTION: {constants.ALPHA: 0.01}}]
    }
    with pytest.raises(errors.UsageError):
        cli.sweep_changes(constants.NPC, cli.LAMBDA, [1.0])


def _desk(mnist_dir, *extra):
    return ["--profile", constants.DESK, "--data-dir", mnist_dir, *extra]


@pytest.fixture
def trained(tmp_path, mnist_dir):
    results = tmp_path / "results"
    argv = ["train", *_desk(mnist_dir, "--epochs", "1", "--no-wall-time", "--results-folder", str(results))]
    assert cli.main(argv) == constants.EXIT_SUCCESS
    (run_dir,) = glob.glob(os.path.join(str(results), "*", constants.SINGLE))
    return run_dir


def test_train_writes_run_outputs(trained):
    metrics = pd.read_csv(os.path.join(trained, constants.METRICS_CSV))
    assert sorted(metrics["task"].unique()) == [1, 2, 3, 4, 5]
    assert metrics.loc[metrics["task"] == 5, "eval_task"].tolist() == [1, 2, 3, 4, 5]
    assert set(metrics["wall_ms"]) == {0}
    for k in range(1, 6):
        assert os.path.isfile(os.path.join(trained, f"task_{k}.npc"))
    summary = pd.read_csv(os.path.join(trained, constants.ACTIVATION_SUMMARY_CSV))
    assert summary["neurons"].tolist() == [128]
    # the data logger file name carries the runner's unique id
    assert glob.glob(os.path.join(trained, "data_logger*.csv"))


def test_eval_scores_every_task(trained, mnist_dir, tmp_path):
    output = str(tmp_path / "eval.csv")
    checkpoint = os.path.join(trained, constants.FINAL_CHECKPOINT)
    argv = ["eval", *_desk(mnist_dir, "--checkpoint", checkpoint, "--output", output)]
    assert cli.main(argv) == constants.EXIT_SUCCESS
    frame = pd.read_csv(output)
    assert frame["task"].tolist() == [1, 2, 3, 4, 5]
    assert frame["classes"].tolist() == ["0 1", "2 3", "4 5", "6 7", "8 9"]
    assert frame["accuracy"].between(0, 1).all()


def test_analyze_between_task_checkpoints(trained, mnist_dir, tmp_path):
    before, after = (os.path.join(trained, f"task_{k}.npc") for k in (1, 2))
    out = str(tmp_path / "analysis")
    argv = ["analyze", *_desk(mnist_dir, "--before", before, "--after", after, "--output-dir", out)]
    assert cli.main(argv) == constants.EXIT_SUCCESS
    table = pd.read_csv(os.path.join(out, constants.ACTIVATION_CHANGE_CSV))
    # three validation images per class, two classes in task 1
    assert len(table) == 128 * 6
    bad_probe = ["analyze", *_desk(mnist_dir, "--before", before, "--after", after, "--probe-task", "9")]
    assert cli.main(bad_probe) == constants.EXIT_USAGE


def test_eval_rejects_corrupt_checkpoint(mnist_dir, tmp_path):
    path = tmp_path / "broken.npc"
    path.write_bytes(b"NOPE")
    assert cli.main(["eval", *_desk(mnist_dir, "--checkpoint", str(path))]) == constants.EXIT_DATA


def test_serial_sweep_aggregates(tmp_path, mnist_dir):
    results = tmp_path / "results"
    argv = [
        "sweep",
        *_desk(mnist_dir, "--strategy", "ewc", "--epochs", "1", "--max-tasks", "2"),
        "--values", "0.1,1",
        "--seeds", "0,1",
        "--serial",
        "--results-folder", str(results),
    ]
    assert cli.main(argv) == constants.EXIT_SUCCESS
    (summary_path,) = glob.glob(os.path.join(str(results), "*", constants.SUMMARY_CSV))
    summary = pd.read_csv(summary_path)
    assert sorted(summary["run_id"]) == ["ewc_lambda_0.1", "ewc_lambda_1"]
    assert summary["seeds"].tolist() == [2, 2]


@pytest.mark.parametrize(
    "error, code",
    [
        (errors.NumericalAbort("diverged"), constants.EXIT_NUMERICAL),
        (errors.FormatError("bad magic"), constants.EXIT_DATA),
        (errors.ConfigurationError("bad alpha"), constants.EXIT_USAGE),
    ],
)
def test_parallel_exit_codes(error, code):
    from plasticity_control import parallel_run

    assert parallel_run.exit_code_for(error) == code
